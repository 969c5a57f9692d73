"""Approximate network morphisms on cell genotypes.

Each transformation takes an architecture and a numpy Generator and returns a
new architecture plus a :class:`Step` describing exactly what was chosen.
Transformations that have no admissible target raise :class:`NotApplicable`.
Every random choice can also be passed explicitly, which is how a recorded
lineage is replayed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

from .encoding import (
    ACTIVATIONS,
    COMBINATIONS,
    Activation,
    Architecture,
    Block,
    BlockKind,
    Combination,
    SOURCE_KINDS,
    new_base_architecture,
    validate,
)

MAX_PAIR_DRAWS = 32


class NotApplicable(Exception):
    pass


class TransformKind(str, Enum):
    ADD_UNIT = "add_unit"
    REMOVE_UNIT = "remove_unit"
    ADD_CONNECTION = "add_connection"
    REMOVE_CONNECTION = "remove_connection"
    ADD_RECURRENT_CONNECTION = "add_recurrent_connection"
    CHANGE_ACTIVATION = "change_activation"
    CHANGE_COMBINATION = "change_combination"

    @property
    def destructive(self) -> bool:
        return self in (TransformKind.REMOVE_UNIT, TransformKind.REMOVE_CONNECTION)


ALL_KINDS = tuple(TransformKind)
CONSTRUCTIVE_KINDS = tuple(k for k in TransformKind if not k.destructive)

BLOCK_DELTA = {
    TransformKind.ADD_UNIT: 1,
    TransformKind.REMOVE_UNIT: -1,
    TransformKind.ADD_CONNECTION: 1,
    TransformKind.REMOVE_CONNECTION: -1,
    TransformKind.ADD_RECURRENT_CONNECTION: 1,
    TransformKind.CHANGE_ACTIVATION: 0,
    TransformKind.CHANGE_COMBINATION: 0,
}


@dataclass(frozen=True)
class Step:
    kind: TransformKind
    applied: bool
    # The choices made; passing them back as keyword arguments replays the step.
    choices: dict = field(default_factory=dict)

    @property
    def blocks(self) -> tuple[int, ...]:
        return tuple(v for k, v in sorted(self.choices.items()) if isinstance(v, int))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "applied": self.applied, "choices": self.choices}

    @classmethod
    def from_dict(cls, d: dict) -> "Step":
        return cls(TransformKind(d["kind"]), d["applied"], dict(d["choices"]))


@dataclass(frozen=True)
class MorphismRecord:
    parent: str
    steps: tuple[Step, ...]
    offspring: str

    def to_dict(self) -> dict:
        return {
            "parent": self.parent,
            "offspring": self.offspring,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MorphismRecord":
        return cls(d["parent"], tuple(Step.from_dict(s) for s in d["steps"]), d["offspring"])


# ----------------------------------------------------------------- helpers


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


def _with(arch: Architecture, *blocks: Block, drop: tuple[int, ...] = (), next_id: int | None = None):
    new = {i: b for i, b in arch.blocks.items() if i not in drop}
    for b in blocks:
        new[b.id] = b
    return Architecture(new, arch.identifier, arch.next_id if next_id is None else next_id)


def _rewire(block: Block, old: int, new: int) -> Block:
    return Block(
        block.id,
        block.kind,
        tuple(new if i == old else i for i in block.inputs),
        block.activation,
        block.combination,
    )


def _redirect(arch: Architecture, old: int, new: int, skip: int | None = None) -> list[Block]:
    """Consumers of ``old`` rewired to read ``new`` (except block ``skip``)."""
    return [_rewire(arch[c], old, new) for c in arch.consumers(old) if c != skip]


def _hidden_activations(arch):
    return [b for b in arch.hidden() if b.kind is BlockKind.ACTIVATION]


def _hidden_combinations(arch):
    return [b for b in arch.hidden() if b.kind is BlockKind.COMBINATION]


# ----------------------------------------------------------- transformations


def add_unit(arch: Architecture, rng, target=None, position=None, activation=None, new=None):
    """Splice a new activation block into one input edge of a non-input block.

    Edges leaving x are never split: only a projection may read x, and a new
    projection there would change the width seen by the existing one.
    """
    x = arch.x_id
    if target is None:
        cands = [
            b for b in arch.blocks.values()
            if b.kind not in SOURCE_KINDS and any(i != x for i in b.inputs)
        ]
        if not cands:
            raise NotApplicable("no block with a splittable input edge")
        target = _pick(rng, cands).id
    b_r = arch[target]
    if position is None:
        position = _pick(rng, [n for n, i in enumerate(b_r.inputs) if i != x])
    if activation is None:
        activation = _pick(rng, ACTIVATIONS)
    activation = Activation(activation)
    new = arch.next_id if new is None else new
    src = b_r.inputs[position]
    inputs = list(b_r.inputs)
    inputs[position] = new
    out = _with(
        arch,
        Block(new, BlockKind.ACTIVATION, (src,), activation=activation),
        Block(b_r.id, b_r.kind, tuple(inputs), b_r.activation, b_r.combination),
        next_id=max(arch.next_id, new + 1),
    )
    return out, Step(
        TransformKind.ADD_UNIT,
        True,
        {"target": target, "position": position, "activation": activation.value, "new": new},
    )


def _remove_unit_result(arch: Architecture, block: Block) -> Architecture:
    src = block.inputs[0]
    return _with(arch, *_redirect(arch, block.id, src), drop=(block.id,))


def remove_unit(arch: Architecture, rng, target=None):
    """Delete a hidden activation block, reconnecting its consumers to its input."""
    if target is None:
        x = arch.x_id
        cands = [
            b.id for b in _hidden_activations(arch)
            if b.inputs[0] != x and validate(_remove_unit_result(arch, b)).ok
        ]
        if not cands:
            raise NotApplicable("no removable activation block")
        target = _pick(rng, cands)
    out = _remove_unit_result(arch, arch[target])
    return out, Step(TransformKind.REMOVE_UNIT, True, {"target": target})


def _connection_admissible(arch: Architecture, first: int, second: int) -> bool:
    if first == second:
        return False
    a, b = arch[first], arch[second]
    if first in b.inputs or second in a.inputs:
        return False
    pair = {first, second}
    for blk in arch.blocks.values():
        if blk.kind is BlockKind.COMBINATION and set(blk.inputs) == pair:
            return False
    # Consumers of ``first`` will read ``second``; a path first -> second would close a loop.
    return second not in arch.descendants(first)


def add_connection(arch: Architecture, rng, first=None, second=None, new=None):
    """Join two hidden blocks with a new add block that replaces ``first`` downstream."""
    if first is None or second is None:
        hidden = [b.id for b in arch.hidden()]
        if len(hidden) < 2:
            raise NotApplicable("fewer than two hidden blocks")
        for _ in range(MAX_PAIR_DRAWS):
            i, j = rng.choice(len(hidden), size=2, replace=False)
            if _connection_admissible(arch, hidden[i], hidden[j]):
                first, second = hidden[i], hidden[j]
                break
        else:
            raise NotApplicable(f"no admissible pair in {MAX_PAIR_DRAWS} draws")
    new = arch.next_id if new is None else new
    comb = Block(new, BlockKind.COMBINATION, (first, second), combination=Combination.ADD)
    out = _with(arch, comb, *_redirect(arch, first, new), next_id=max(arch.next_id, new + 1))
    return out, Step(TransformKind.ADD_CONNECTION, True, {"first": first, "second": second, "new": new})


def _remove_connection_result(arch: Architecture, block: Block) -> Architecture:
    return _with(arch, *_redirect(arch, block.id, block.inputs[0]), drop=(block.id,))


def removable_connections(arch: Architecture) -> list[int]:
    """Hidden add blocks whose removal leaves no block unused.

    Consumers are rewired to the first input, so only the second input needs
    another reader.
    """
    out = []
    for b in _hidden_combinations(arch):
        if b.combination is not Combination.ADD:
            continue
        if any(c != b.id for c in arch.consumers(b.inputs[1])):
            if validate(_remove_connection_result(arch, b)).ok:
                out.append(b.id)
    return out


def remove_connection(arch: Architecture, rng, target=None):
    if target is None:
        cands = removable_connections(arch)
        if not cands:
            raise NotApplicable("no removable add block")
        target = _pick(rng, cands)
    out = _remove_connection_result(arch, arch[target])
    return out, Step(TransformKind.REMOVE_CONNECTION, True, {"target": target})


def add_recurrent_connection(arch: Architecture, rng, output=None, source=None, new=None):
    """Add a hidden block's value into the input of h_next or c_next."""
    if output is None:
        output = _pick(rng, [arch.h_next_id, arch.c_next_id])
    if source is None:
        hidden = [b.id for b in arch.hidden()]
        if not hidden:
            raise NotApplicable("no hidden blocks")
        # Output blocks have no consumers, so any source keeps the graph acyclic.
        source = _pick(rng, hidden)
    out_block = arch[output]
    new = arch.next_id if new is None else new
    comb = Block(new, BlockKind.COMBINATION, (out_block.inputs[0], source), combination=Combination.ADD)
    out = _with(
        arch,
        comb,
        Block(output, out_block.kind, (new,)),
        next_id=max(arch.next_id, new + 1),
    )
    return out, Step(
        TransformKind.ADD_RECURRENT_CONNECTION, True, {"output": output, "source": source, "new": new}
    )


def _activation_options(arch: Architecture, block: Block) -> list[Activation]:
    if block.inputs[0] == arch.x_id:
        # x readers must stay projections.
        allowed = [Activation.LINEAR, Activation.LINEAR_B]
    else:
        allowed = list(ACTIVATIONS)
    return [a for a in allowed if a is not block.activation]


def change_activation(arch: Architecture, rng, target=None, activation=None):
    if target is None:
        cands = _hidden_activations(arch)
        if not cands:
            raise NotApplicable("no hidden activation block")
        target = _pick(rng, cands).id
    b = arch[target]
    if activation is None:
        activation = _pick(rng, _activation_options(arch, b))
    activation = Activation(activation)
    out = _with(arch, Block(b.id, b.kind, b.inputs, activation=activation))
    return out, Step(
        TransformKind.CHANGE_ACTIVATION, True, {"target": target, "activation": activation.value}
    )


def change_combination(arch: Architecture, rng, target=None, combination=None):
    if target is None:
        cands = _hidden_combinations(arch)
        if not cands:
            raise NotApplicable("no hidden combination block")
        target = _pick(rng, cands).id
    b = arch[target]
    if combination is None:
        combination = _pick(rng, [c for c in COMBINATIONS if c is not b.combination])
    combination = Combination(combination)
    out = _with(arch, Block(b.id, b.kind, b.inputs, combination=combination))
    return out, Step(
        TransformKind.CHANGE_COMBINATION, True, {"target": target, "combination": combination.value}
    )


TRANSFORMS = {
    TransformKind.ADD_UNIT: add_unit,
    TransformKind.REMOVE_UNIT: remove_unit,
    TransformKind.ADD_CONNECTION: add_connection,
    TransformKind.REMOVE_CONNECTION: remove_connection,
    TransformKind.ADD_RECURRENT_CONNECTION: add_recurrent_connection,
    TransformKind.CHANGE_ACTIVATION: change_activation,
    TransformKind.CHANGE_COMBINATION: change_combination,
}


def apply(kind: TransformKind, arch: Architecture, rng, **choices):
    return TRANSFORMS[TransformKind(kind)](arch, rng, **choices)


# ---------------------------------------------------------------- lineage

_IDENT = re.compile(r"^(.*)_(\d+)$")


def split_identifier(identifier: str) -> tuple[str, int]:
    m = _IDENT.match(identifier)
    if not m:
        raise ValueError(f"identifier {identifier!r} is not of the form X_c")
    return m.group(1), int(m.group(2))


class IdentifierPool:
    """Hands out X_c identifiers.

    Offspring of X_c get X_c' with c' one past the largest counter issued for
    X so far, so counters strictly increase along every lineage and stay
    unique across siblings.
    """

    def __init__(self):
        self.counters: dict[str, int] = {}
        self.random_count = 0

    def register(self, identifier: str) -> str:
        prefix, c = split_identifier(identifier)
        self.counters[prefix] = max(self.counters.get(prefix, c), c)
        return identifier

    def offspring(self, parent: str) -> str:
        prefix, c = split_identifier(parent)
        nxt = max(self.counters.get(prefix, c), c) + 1
        self.counters[prefix] = nxt
        return f"{prefix}_{nxt}"

    def random(self) -> str:
        ident = f"rdm{self.random_count}_0"
        self.random_count += 1
        return self.register(ident)


def generate_offspring(
    parent: Architecture,
    max_transforms: int,
    rng,
    pool: IdentifierPool | None = None,
    kinds=ALL_KINDS,
) -> tuple[Architecture, MorphismRecord]:
    """Apply between 1 and ``max_transforms`` uniformly drawn transformations.

    A transformation that turns out not applicable still uses up its slot.
    """
    if max_transforms < 1:
        raise ValueError("max_transforms must be at least 1")
    k = int(rng.integers(1, max_transforms + 1))
    arch = parent
    steps = []
    for _ in range(k):
        kind = _pick(rng, kinds)
        try:
            arch, step = TRANSFORMS[kind](arch, rng)
        except NotApplicable:
            step = Step(kind, False)
        steps.append(step)
    if pool is None:
        prefix, c = split_identifier(parent.identifier)
        ident = f"{prefix}_{c + 1}"
    else:
        ident = pool.offspring(parent.identifier)
    arch = arch.replace(identifier=ident)
    return arch, MorphismRecord(parent.identifier, tuple(steps), ident)


def replay(parent: Architecture, record: MorphismRecord) -> Architecture:
    """Rebuild an offspring from its parent and recorded choices."""
    arch = parent
    for step in record.steps:
        if step.applied:
            arch, _ = TRANSFORMS[step.kind](arch, None, **step.choices)
    return arch.replace(identifier=record.offspring)


def random_initial_architecture(rng, pool: IdentifierPool | None = None, max_transforms: int = 10):
    """Base architecture plus 1..10 constructive transformations, named rdmY_0."""
    ident = (pool or IdentifierPool()).random()
    arch = new_base_architecture(rng, ident)
    k = int(rng.integers(1, max_transforms + 1))
    for _ in range(k):
        kind = _pick(rng, CONSTRUCTIVE_KINDS)
        try:
            arch, _ = TRANSFORMS[kind](arch, rng)
        except NotApplicable:
            pass
    return arch
