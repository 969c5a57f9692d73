"""Block-encoded recurrent cell genotypes.

A cell is a DAG of blocks.  Three input blocks (x, h, c) feed a hidden layer
of activation and combination blocks, which in turn feed the two output
blocks (h_next, c_next).  Recurrence happens only across time steps through
h and c, so the intra-cell graph is acyclic.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

SCHEMA_VERSION = 1


class BlockKind(str, Enum):
    INPUT_X = "input_x"
    INPUT_H = "input_h"
    INPUT_C = "input_c"
    OUTPUT_H = "output_h"
    OUTPUT_C = "output_c"
    ACTIVATION = "activation"
    COMBINATION = "combination"
    # Constant vector of ones.  Only the GRU seed uses it, for the (1 - z) term.
    CONSTANT_ONE = "constant_one"


class Activation(str, Enum):
    LINEAR_B = "linear_b"
    LINEAR = "linear"
    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"

    @property
    def has_weights(self) -> bool:
        return self in (Activation.LINEAR_B, Activation.LINEAR)


class Combination(str, Enum):
    ADD = "add"
    SUB = "sub"
    ELEM_MUL = "elem_mul"


ACTIVATIONS = tuple(Activation)
COMBINATIONS = tuple(Combination)

INPUT_KINDS = (BlockKind.INPUT_X, BlockKind.INPUT_H, BlockKind.INPUT_C)
OUTPUT_KINDS = (BlockKind.OUTPUT_H, BlockKind.OUTPUT_C)
SOURCE_KINDS = INPUT_KINDS + (BlockKind.CONSTANT_ONE,)
HIDDEN_KINDS = (BlockKind.ACTIVATION, BlockKind.COMBINATION)

ARITY = {
    BlockKind.INPUT_X: 0,
    BlockKind.INPUT_H: 0,
    BlockKind.INPUT_C: 0,
    BlockKind.CONSTANT_ONE: 0,
    BlockKind.OUTPUT_H: 1,
    BlockKind.OUTPUT_C: 1,
    BlockKind.ACTIVATION: 1,
    BlockKind.COMBINATION: 2,
}


class CycleDetected(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, location: str):
        super().__init__(f"{location}: {message}")
        self.location = location


class ValidationError(ValueError):
    def __init__(self, report: "ValidationReport"):
        super().__init__(str(report))
        self.report = report


@dataclass(frozen=True)
class Block:
    id: int
    kind: BlockKind
    inputs: tuple[int, ...] = ()
    activation: Activation | None = None
    combination: Combination | None = None

    @property
    def label(self) -> str:
        if self.kind is BlockKind.ACTIVATION:
            return self.activation.value
        if self.kind is BlockKind.COMBINATION:
            return self.combination.value
        return {
            BlockKind.INPUT_X: "x",
            BlockKind.INPUT_H: "h",
            BlockKind.INPUT_C: "c",
            BlockKind.OUTPUT_H: "h_next",
            BlockKind.OUTPUT_C: "c_next",
            BlockKind.CONSTANT_ONE: "one",
        }[self.kind]

    @property
    def is_hidden(self) -> bool:
        return self.kind in HIDDEN_KINDS

    @property
    def has_weights(self) -> bool:
        return self.kind is BlockKind.ACTIVATION and self.activation.has_weights


@dataclass(frozen=True)
class Architecture:
    """Immutable cell genotype.

    ``next_id`` is the first id never handed out in this lineage; morphisms
    allocate from it so that removed ids are never reused.
    """

    blocks: Mapping[int, Block]
    identifier: str = "arch_0"
    next_id: int = 0

    def __post_init__(self):
        blocks = dict(sorted(self.blocks.items()))
        object.__setattr__(self, "blocks", blocks)
        floor = max(blocks, default=0) + 1
        if self.next_id < floor:
            object.__setattr__(self, "next_id", floor)

    def __getitem__(self, block_id: int) -> Block:
        return self.blocks[block_id]

    def __len__(self) -> int:
        return len(self.blocks)

    def __eq__(self, other):
        if not isinstance(other, Architecture):
            return NotImplemented
        return (
            self.identifier == other.identifier
            and self.next_id == other.next_id
            and self.blocks == other.blocks
        )

    def __hash__(self):
        return hash((self.identifier, tuple(self.blocks.items())))

    def find(self, kind: BlockKind) -> int:
        for b in self.blocks.values():
            if b.kind is kind:
                return b.id
        raise KeyError(kind)

    @property
    def x_id(self) -> int:
        return self.find(BlockKind.INPUT_X)

    @property
    def h_id(self) -> int:
        return self.find(BlockKind.INPUT_H)

    @property
    def c_id(self) -> int:
        return self.find(BlockKind.INPUT_C)

    @property
    def h_next_id(self) -> int:
        return self.find(BlockKind.OUTPUT_H)

    @property
    def c_next_id(self) -> int:
        return self.find(BlockKind.OUTPUT_C)

    def hidden(self) -> list[Block]:
        return [b for b in self.blocks.values() if b.is_hidden]

    def consumers(self, block_id: int) -> list[int]:
        return [b.id for b in self.blocks.values() if block_id in b.inputs]

    def descendants(self, block_id: int) -> set[int]:
        """Ids reachable downstream of ``block_id`` (excluding itself)."""
        succ: dict[int, list[int]] = {i: [] for i in self.blocks}
        for b in self.blocks.values():
            for src in b.inputs:
                if src in succ:
                    succ[src].append(b.id)
        seen: set[int] = set()
        stack = list(succ[block_id])
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(succ[n])
        return seen

    def replace(self, blocks: Mapping[int, Block] | None = None, **kw) -> "Architecture":
        return Architecture(
            blocks=self.blocks if blocks is None else blocks,
            identifier=kw.get("identifier", self.identifier),
            next_id=kw.get("next_id", self.next_id),
        )


def _arch(blocks: Iterable[Block], identifier: str) -> Architecture:
    return Architecture({b.id: b for b in blocks}, identifier)


def _act(i: int, src: int, fn: Activation) -> Block:
    return Block(i, BlockKind.ACTIVATION, (src,), activation=fn)


def _comb(i: int, a: int, b: int, fn: Combination) -> Block:
    return Block(i, BlockKind.COMBINATION, (a, b), combination=fn)


def _inputs() -> list[Block]:
    return [
        Block(1, BlockKind.INPUT_X),
        Block(2, BlockKind.INPUT_H),
        Block(3, BlockKind.INPUT_C),
    ]


A, C = Activation, Combination


def new_base_architecture(rng, identifier: str = "base_0") -> Architecture:
    """The 10-block starting point for random architectures (ids 1..10)."""
    comb = COMBINATIONS[rng.integers(len(COMBINATIONS))]
    act = ACTIVATIONS[rng.integers(len(ACTIVATIONS))]
    return _arch(
        _inputs()
        + [
            _act(4, 1, A.LINEAR),
            _act(5, 2, A.LINEAR),
            _act(6, 3, A.LINEAR),
            _comb(7, 4, 5, comb),
            _act(8, 7, act),
            Block(9, BlockKind.OUTPUT_H, (8,)),
            Block(10, BlockKind.OUTPUT_C, (6,)),
        ],
        identifier,
    )


def encode_basic_rnn(identifier: str = "BASIC_0") -> Architecture:
    """h' = tanh(W x + b_x + U h + b_h); c passes through an identity block."""
    return _arch(
        _inputs()
        + [
            _act(4, 1, A.LINEAR_B),
            _act(5, 2, A.LINEAR_B),
            _comb(6, 4, 5, C.ADD),
            _act(7, 6, A.TANH),
            _act(8, 3, A.IDENTITY),
            Block(9, BlockKind.OUTPUT_H, (7,)),
            Block(10, BlockKind.OUTPUT_C, (8,)),
        ],
        identifier,
    )


# Gate layout shared by the LSTM and GRU seeds: each gate is
# act(linear_b(x) + linear(h)), so each gate has one bias, held by its x projection.
def _gate(first: int, act: Activation) -> list[Block]:
    return [
        _act(first, 1, A.LINEAR_B),
        _act(first + 1, 2, A.LINEAR),
        _comb(first + 2, first, first + 1, C.ADD),
        _act(first + 3, first + 2, act),
    ]


LSTM_GATES = {"f": 4, "i": 8, "o": 12, "g": 16}
GRU_GATES = {"z": 4, "r": 8}


def encode_lstm(identifier: str = "LSTM_0") -> Architecture:
    """26 blocks: four 4-block gates, the cell update (3), tanh(c), o*tanh(c), io (5)."""
    g = LSTM_GATES
    return _arch(
        _inputs()
        + _gate(g["f"], A.SIGMOID)
        + _gate(g["i"], A.SIGMOID)
        + _gate(g["o"], A.SIGMOID)
        + _gate(g["g"], A.TANH)
        + [
            _comb(20, 7, 3, C.ELEM_MUL),  # f * c_prev
            _comb(21, 11, 19, C.ELEM_MUL),  # i * g
            _comb(22, 20, 21, C.ADD),  # c_t
            _act(23, 22, A.TANH),
            _comb(24, 15, 23, C.ELEM_MUL),  # h_t = o * tanh(c_t)
            Block(25, BlockKind.OUTPUT_H, (24,)),
            Block(26, BlockKind.OUTPUT_C, (22,)),
        ],
        identifier,
    )


def encode_gru(identifier: str = "GRU_0") -> Architecture:
    """23 blocks.

    z and r gates (4 blocks each), candidate n = tanh(W_xn x + W_n (r * h))
    (5 blocks), h' = z * h + (1 - z) * n (5 blocks incl. the constant one),
    and the io blocks.  c_next reads c directly, with no pass-through block.
    """
    g = GRU_GATES
    return _arch(
        _inputs()
        + _gate(g["z"], A.SIGMOID)
        + _gate(g["r"], A.SIGMOID)
        + [
            _act(12, 1, A.LINEAR),  # W_xn x
            _comb(13, 11, 2, C.ELEM_MUL),  # r * h
            _act(14, 13, A.LINEAR),  # W_n (r * h)
            _comb(15, 12, 14, C.ADD),
            _act(16, 15, A.TANH),  # n
            _comb(17, 7, 2, C.ELEM_MUL),  # z * h
            Block(18, BlockKind.CONSTANT_ONE),
            _comb(19, 18, 7, C.SUB),  # 1 - z
            _comb(20, 19, 16, C.ELEM_MUL),
            _comb(21, 17, 20, C.ADD),
            Block(22, BlockKind.OUTPUT_H, (21,)),
            Block(23, BlockKind.OUTPUT_C, (3,)),
        ],
        identifier,
    )


SEEDS = {
    "basic_rnn": (encode_basic_rnn, "BASIC"),
    "lstm": (encode_lstm, "LSTM"),
    "gru": (encode_gru, "GRU"),
}


def block_count(arch: Architecture) -> int:
    return len(arch.blocks)


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    block_id: int | None
    rule: str
    message: str = ""

    def __str__(self):
        where = "" if self.block_id is None else f"block {self.block_id}: "
        return f"{where}{self.rule}" + (f" ({self.message})" if self.message else "")


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def add(self, block_id, rule, message=""):
        self.violations.append(Violation(block_id, rule, message))

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "valid"
        return "; ".join(str(v) for v in self.violations)


def validate(arch: Architecture) -> ValidationReport:
    """Check every structural rule; never raises."""
    report = ValidationReport()
    blocks = arch.blocks

    counts = Counter(b.kind for b in blocks.values())
    for kind in INPUT_KINDS + OUTPUT_KINDS:
        if counts[kind] != 1:
            report.add(None, "io-block-count", f"{counts[kind]} blocks of kind {kind.value}")

    for b in blocks.values():
        if b.kind in OUTPUT_KINDS and not b.inputs:
            report.add(b.id, "output-without-input")
            continue
        if len(b.inputs) != ARITY[b.kind]:
            report.add(b.id, "bad-arity", f"{len(b.inputs)} inputs, expected {ARITY[b.kind]}")
        if b.kind is BlockKind.ACTIVATION and not isinstance(b.activation, Activation):
            report.add(b.id, "missing-function")
        if b.kind is BlockKind.COMBINATION and not isinstance(b.combination, Combination):
            report.add(b.id, "missing-function")
        for src in b.inputs:
            if src == b.id:
                report.add(b.id, "self-reference")
            elif src not in blocks:
                report.add(b.id, "dangling-reference", f"input {src} does not exist")
            elif blocks[src].kind in OUTPUT_KINDS:
                report.add(b.id, "output-consumed", f"input {src} is an output block")

    if not report.ok:
        # Graph-level checks below assume well-formed references.
        return report

    try:
        order = topological_order(arch)
    except CycleDetected as exc:
        report.add(None, "cycle", str(exc))
        return report

    # Every non-source block must reach an output.
    live: set[int] = set()
    stack = [b.id for b in blocks.values() if b.kind in OUTPUT_KINDS]
    while stack:
        n = stack.pop()
        if n not in live:
            live.add(n)
            stack.extend(blocks[n].inputs)
    for i in order:
        b = blocks[i]
        if b.kind in INPUT_KINDS:
            continue
        if i not in live:
            report.add(i, "dangling-block", "not on any path to an output")

    h = arch.h_id
    if not any(h in b.inputs for b in blocks.values()):
        report.add(h, "hidden-state-unused")

    # x is the only source with its own width; only projections may read it.
    x = arch.x_id
    for b in blocks.values():
        if x in b.inputs and not b.has_weights:
            report.add(b.id, "x-consumer-not-projection")
    return report


def check(arch: Architecture) -> Architecture:
    report = validate(arch)
    if not report.ok:
        raise ValidationError(report)
    return arch


def topological_order(arch: Architecture) -> list[int]:
    """Kahn's algorithm with the smallest ready id first."""
    indeg = {i: 0 for i in arch.blocks}
    succ: dict[int, list[int]] = {i: [] for i in arch.blocks}
    for b in arch.blocks.values():
        for src in b.inputs:
            if src in succ:
                succ[src].append(b.id)
                indeg[b.id] += 1
    ready = [i for i, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(ready, m)
    if len(order) != len(arch.blocks):
        stuck = sorted(set(arch.blocks) - set(order))
        raise CycleDetected(f"cycle among blocks {stuck}")
    return order


def structural_key(arch: Architecture) -> str:
    """Canonical id-free description of the computation.

    Two architectures with equal keys compute the same function family.
    Add and elem_mul are commutative, so their operands are sorted.
    """
    memo: dict[int, str] = {}

    def expr(i: int) -> str:
        if i in memo:
            return memo[i]
        b = arch.blocks[i]
        args = [expr(j) for j in b.inputs]
        if b.combination in (Combination.ADD, Combination.ELEM_MUL):
            args.sort()
        s = b.label + ("(" + ",".join(args) + ")" if args else "")
        memo[i] = s
        return s

    return expr(arch.h_next_id) + "|" + expr(arch.c_next_id)


# -------------------------------------------------------------- rendering/io


def to_dot(arch: Architecture) -> str:
    def name(b: Block) -> str:
        return f"{b.label}_{b.id}"

    lines = [
        f"// cellevo-dot schema {SCHEMA_VERSION}",
        f'digraph "{arch.identifier}" {{',
        "  rankdir=TB;",
    ]
    for b in arch.blocks.values():
        shape = "box" if b.kind in SOURCE_KINDS + OUTPUT_KINDS else "ellipse"
        lines.append(f'  {name(b)} [label="{b.label}\\n#{b.id}", shape={shape}];')
    for b in arch.blocks.values():
        for pos, src in enumerate(b.inputs):
            attr = f' [label="{pos}"]' if b.combination is Combination.SUB else ""
            lines.append(f"  {name(arch.blocks[src])} -> {name(b)}{attr};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_dict(arch: Architecture) -> dict:
    out = []
    for b in arch.blocks.values():
        d: dict = {"id": b.id, "kind": b.kind.value}
        if b.activation is not None:
            d["activation"] = b.activation.value
        if b.combination is not None:
            d["combination"] = b.combination.value
        d["inputs"] = list(b.inputs)
        out.append(d)
    return {
        "schema_version": SCHEMA_VERSION,
        "identifier": arch.identifier,
        "next_id": arch.next_id,
        "blocks": out,
    }


def serialize(arch: Architecture) -> str:
    return json.dumps(to_dict(arch), indent=1)


def from_dict(doc, where: str = "$") -> Architecture:
    if not isinstance(doc, dict):
        raise ParseError("expected an object", where)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {doc.get('schema_version')!r}", f"{where}.schema_version")
    ident = doc.get("identifier")
    if not isinstance(ident, str):
        raise ParseError("identifier must be a string", f"{where}.identifier")
    raw = doc.get("blocks")
    if not isinstance(raw, list):
        raise ParseError("blocks must be a list", f"{where}.blocks")
    blocks: dict[int, Block] = {}
    for n, item in enumerate(raw):
        loc = f"{where}.blocks[{n}]"
        if not isinstance(item, dict):
            raise ParseError("expected an object", loc)
        try:
            bid = item["id"]
            kind = BlockKind(item["kind"])
            inputs = item.get("inputs", [])
            act = Activation(item["activation"]) if "activation" in item else None
            comb = Combination(item["combination"]) if "combination" in item else None
        except KeyError as exc:
            raise ParseError(f"missing field {exc}", loc) from None
        except ValueError as exc:
            raise ParseError(str(exc), loc) from None
        if not isinstance(bid, int) or isinstance(bid, bool):
            raise ParseError("id must be an integer", f"{loc}.id")
        if not isinstance(inputs, list) or not all(isinstance(i, int) for i in inputs):
            raise ParseError("inputs must be a list of integers", f"{loc}.inputs")
        if bid in blocks:
            raise ParseError(f"duplicate block id {bid}", f"{loc}.id")
        blocks[bid] = Block(bid, kind, tuple(inputs), act, comb)
    next_id = doc.get("next_id", 0)
    if not isinstance(next_id, int):
        raise ParseError("next_id must be an integer", f"{where}.next_id")
    return Architecture(blocks, ident, next_id)


def deserialize(text: str) -> Architecture:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return check(from_dict(doc))
