"""Executable recurrent cells compiled from block genotypes.

The compiled form is a flat instruction list over value slots, one slot per
block, executed in topological order once per time step.  Gradients are
computed by hand-written reverse-mode accumulation over a tape of slot values
(backpropagation through time).  Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .encoding import (
    Activation,
    Architecture,
    BlockKind,
    Combination,
    check,
    topological_order,
)

LEAKY_SLOPE = 0.01

# opcodes
COPY, CONST, LINEAR, LINEAR_B, IDENTITY, SIGMOID, TANH, RELU, LEAKY, ADD, SUB, MUL = range(12)

_ACT_OP = {
    Activation.LINEAR: LINEAR,
    Activation.LINEAR_B: LINEAR_B,
    Activation.IDENTITY: IDENTITY,
    Activation.SIGMOID: SIGMOID,
    Activation.TANH: TANH,
    Activation.RELU: RELU,
    Activation.LEAKY_RELU: LEAKY,
}
_COMB_OP = {Combination.ADD: ADD, Combination.SUB: SUB, Combination.ELEM_MUL: MUL}


class ShapeError(ValueError):
    pass


class NonFiniteValue(ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class Diverged(RuntimeError):
    pass


@dataclass(frozen=True)
class CellDims:
    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError(f"dimensions must be positive, got {self}")


@dataclass(frozen=True)
class Instruction:
    op: int
    out: int
    args: tuple[int, ...]
    block_id: int


@dataclass(frozen=True)
class CellProgram:
    dims: CellDims
    instructions: tuple[Instruction, ...]
    widths: tuple[int, ...]
    slot_of: dict  # block id -> slot
    x_slot: int
    h_slot: int
    c_slot: int
    h_out: int
    c_out: int
    # block id -> (out, in) weight shape, and whether it has a bias
    weight_shapes: dict = field(default_factory=dict)

    @property
    def n_slots(self) -> int:
        return len(self.widths)


def compile(arch: Architecture, dims: CellDims) -> CellProgram:
    check(arch)
    order = topological_order(arch)
    slot_of = {bid: n for n, bid in enumerate(order)}
    widths = [0] * len(order)
    instructions = []
    shapes = {}
    hid = dims.hidden_dim
    for bid in order:
        b = arch[bid]
        s = slot_of[bid]
        args = tuple(slot_of[i] for i in b.inputs)
        kind = b.kind
        if kind is BlockKind.INPUT_X:
            widths[s] = dims.input_dim
            continue
        if kind in (BlockKind.INPUT_H, BlockKind.INPUT_C):
            widths[s] = hid
            continue
        if kind is BlockKind.CONSTANT_ONE:
            widths[s] = hid
            instructions.append(Instruction(CONST, s, (), bid))
            continue
        if kind in (BlockKind.OUTPUT_H, BlockKind.OUTPUT_C):
            if widths[args[0]] != hid:
                raise ShapeError(f"block {bid}: output receives width {widths[args[0]]}, expected {hid}")
            widths[s] = hid
            instructions.append(Instruction(COPY, s, args, bid))
            continue
        if kind is BlockKind.ACTIVATION:
            op = _ACT_OP[b.activation]
            if op in (LINEAR, LINEAR_B):
                shapes[bid] = ((hid, widths[args[0]]), op == LINEAR_B)
                widths[s] = hid
            else:
                widths[s] = widths[args[0]]
        else:
            op = _COMB_OP[b.combination]
            wa, wb = widths[args[0]], widths[args[1]]
            if wa != wb:
                raise ShapeError(f"block {bid}: combining widths {wa} and {wb}")
            widths[s] = wa
        instructions.append(Instruction(op, s, args, bid))
    return CellProgram(
        dims=dims,
        instructions=tuple(instructions),
        widths=tuple(widths),
        slot_of=slot_of,
        x_slot=slot_of[arch.x_id],
        h_slot=slot_of[arch.h_id],
        c_slot=slot_of[arch.c_id],
        h_out=slot_of[arch.h_next_id],
        c_out=slot_of[arch.c_next_id],
        weight_shapes=shapes,
    )


# ------------------------------------------------------------------ params


class ParamStore(dict):
    """Maps a block id (or a reserved string key) to ``{"W": ..., "b": ...}``."""

    def copy(self) -> "ParamStore":
        return ParamStore({k: {n: a.copy() for n, a in v.items()} for k, v in self.items()})

    def count(self) -> int:
        return sum(a.size for v in self.values() for a in v.values())

    def sq_norm(self) -> float:
        return sum(float(np.vdot(a, a)) for v in self.values() for a in v.values())

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: {n: np.zeros_like(a) for n, a in v.items()} for k, v in self.items()})

    def scaled(self, factor: float) -> "ParamStore":
        return ParamStore({k: {n: a * factor for n, a in v.items()} for k, v in self.items()})

    def allclose(self, other: "ParamStore", atol: float = 0.0) -> bool:
        if self.keys() != other.keys():
            return False
        for k, v in self.items():
            if v.keys() != other[k].keys():
                return False
            for n, a in v.items():
                b = other[k][n]
                if a.shape != b.shape or not np.allclose(a, b, rtol=0, atol=atol):
                    return False
        return True

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f"{k}/{n}": a for k, v in self.items() for n, a in v.items()}

    @classmethod
    def from_arrays(cls, arrays) -> "ParamStore":
        store = cls()
        for name in arrays:
            key, n = name.rsplit("/", 1)
            k = int(key) if key.lstrip("-").isdigit() else key
            store.setdefault(k, {})[n] = np.array(arrays[name], dtype=np.float64)
        return store


def param_count(program: CellProgram) -> int:
    total = 0
    for (out, inp), bias in program.weight_shapes.values():
        total += out * inp + (out if bias else 0)
    return total


def _fresh(shape, bias: bool, rng, scale: float) -> dict:
    entry = {"W": rng.uniform(-scale, scale, size=shape)}
    if bias:
        entry["b"] = np.zeros(shape[0])
    return entry


def init_params(program: CellProgram, rng, inherited: ParamStore | None = None) -> ParamStore:
    """Fresh or inherited parameters for every weighted block.

    Fresh weights are uniform in +-1/sqrt(hidden_dim) with zero biases.  When
    ``inherited`` is given, surviving block ids copy the parent tensors and any
    weighted block the parent lacked starts as an identity map (zero bias), so
    inserted projections leave the parent function unchanged.  Keys that are
    not blocks of the program (e.g. a task readout) are copied through.
    """
    scale = 1.0 / math.sqrt(program.dims.hidden_dim)
    store = ParamStore()
    for bid, (shape, bias) in program.weight_shapes.items():
        if inherited is None:
            store[bid] = _fresh(shape, bias, rng, scale)
            continue
        parent = inherited.get(bid)
        if parent is not None and "W" in parent:
            if parent["W"].shape != shape:
                raise ShapeError(f"block {bid}: inherited weight {parent['W'].shape}, expected {shape}")
            entry = {"W": parent["W"].copy()}
            if bias:
                entry["b"] = parent["b"].copy() if "b" in parent else np.zeros(shape[0])
        elif shape[0] == shape[1]:
            entry = {"W": np.eye(shape[0])}
            if bias:
                entry["b"] = np.zeros(shape[0])
        else:
            entry = _fresh(shape, bias, rng, scale)
        store[bid] = entry
    if inherited is not None:
        for k, v in inherited.items():
            if isinstance(k, str):
                store[k] = {n: a.copy() for n, a in v.items()}
    return store


# ------------------------------------------------------------------ forward


@dataclass
class StepState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int) -> "StepState":
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bind(program: CellProgram, params: ParamStore):
    bound = []
    for ins in program.instructions:
        if ins.op in (LINEAR, LINEAR_B):
            p = params[ins.block_id]
            bound.append((ins.op, ins.out, ins.args, p["W"], p.get("b"), ins.block_id))
        else:
            bound.append((ins.op, ins.out, ins.args, None, None, ins.block_id))
    return bound


def _run(bound, n_slots, x_slot, h_slot, c_slot, ones, x, h, c):
    v = [None] * n_slots
    v[x_slot] = x
    v[h_slot] = h
    v[c_slot] = c
    for op, out, args, W, b, _ in bound:
        if op == LINEAR:
            v[out] = W @ v[args[0]]
        elif op == LINEAR_B:
            v[out] = W @ v[args[0]] + b
        elif op == ADD:
            v[out] = v[args[0]] + v[args[1]]
        elif op == MUL:
            v[out] = v[args[0]] * v[args[1]]
        elif op == SUB:
            v[out] = v[args[0]] - v[args[1]]
        elif op == SIGMOID:
            v[out] = _sigmoid(v[args[0]])
        elif op == TANH:
            v[out] = np.tanh(v[args[0]])
        elif op == COPY or op == IDENTITY:
            v[out] = v[args[0]]
        elif op == RELU:
            v[out] = np.maximum(v[args[0]], 0.0)
        elif op == LEAKY:
            a = v[args[0]]
            v[out] = np.where(a > 0, a, LEAKY_SLOPE * a)
        elif op == CONST:
            v[out] = ones
    return v


@dataclass
class Tape:
    program: CellProgram
    bound: list
    steps: list = field(default_factory=list)  # slot values per step

    def __post_init__(self):
        self.ones = np.ones(self.program.dims.hidden_dim)


def forward_step(program: CellProgram, params: ParamStore, x, state: StepState) -> tuple[StepState, Tape]:
    tape = Tape(program, _bind(program, params))
    with np.errstate(over="ignore", invalid="ignore"):
        new = _step(tape, np.asarray(x, dtype=np.float64), state)
    return new, tape


def _step(tape: Tape, x, state: StepState, index: int | None = None) -> StepState:
    # Callers hold np.errstate; overflow surfaces as the non-finite check below.
    p = tape.program
    v = _run(tape.bound, p.n_slots, p.x_slot, p.h_slot, p.c_slot, tape.ones, x, state.h, state.c)
    h, c = v[p.h_out], v[p.c_out]
    if not (np.isfinite(h).all() and np.isfinite(c).all()):
        raise NonFiniteValue("non-finite cell state", index)
    tape.steps.append(v)
    return StepState(h, c)


def unroll(
    program: CellProgram, params: ParamStore, sequence: Sequence, initial: StepState | None = None
) -> tuple[list[StepState], Tape]:
    if len(sequence) == 0:
        raise ValueError("sequence must be nonempty")
    state = initial or StepState.zeros(program.dims.hidden_dim)
    tape = Tape(program, _bind(program, params))
    outputs = []
    with np.errstate(over="ignore", invalid="ignore"):
        for t, x in enumerate(sequence):
            state = _step(tape, np.asarray(x, dtype=np.float64), state, t)
            outputs.append(state)
    return outputs, tape


# ------------------------------------------------------------------ backward


@dataclass
class Gradients:
    params: ParamStore
    h0: np.ndarray
    c0: np.ndarray


def backward(tape: Tape, loss_gradient) -> Gradients:
    """Reverse-mode gradients through every step of ``tape``.

    ``loss_gradient`` has one entry per step: ``(dL/dh_t, dL/dc_t)``, where
    either element may be None.  It may also be an array of shape
    (steps, hidden) holding dL/dh_t only.
    """
    p = tape.program
    hid = p.dims.hidden_dim
    # Per projection: upstream gradients and inputs for every step, reduced
    # to weight gradients with one matmul at the end.
    seen: dict[int, tuple[list, list]] = {}
    rev = tape.bound[::-1]
    gh_next = np.zeros(hid)
    gc_next = np.zeros(hid)
    n_slots = p.n_slots
    h_out, c_out, h_slot, c_slot = p.h_out, p.c_out, p.h_slot, p.c_slot
    for t in range(len(tape.steps) - 1, -1, -1):
        v = tape.steps[t]
        g = [None] * n_slots
        lg = loss_gradient[t]
        if isinstance(lg, tuple):
            gh, gc = lg
        else:
            gh, gc = lg, None
        gh_total = gh_next if gh is None else gh_next + gh
        gc_total = gc_next if gc is None else gc_next + gc
        g[h_out] = gh_total
        g[c_out] = gc_total
        for op, out, args, W, b, _ in rev:
            go = g[out]
            if go is None:
                continue
            if op == LINEAR or op == LINEAR_B:
                a = args[0]
                gos, xs = seen.setdefault(out, ([], []))
                gos.append(go)
                xs.append(v[a])
                d = W.T @ go
                g[a] = d if g[a] is None else g[a] + d
                continue
            if op == CONST:
                continue
            if op == ADD or op == SUB or op == MUL:
                a0, a1 = args
                if op == ADD:
                    d0, d1 = go, go
                elif op == SUB:
                    d0, d1 = go, -go
                else:
                    d0, d1 = go * v[a1], go * v[a0]
                g[a0] = d0 if g[a0] is None else g[a0] + d0
                g[a1] = d1 if g[a1] is None else g[a1] + d1
                continue
            a = args[0]
            if op == COPY or op == IDENTITY:
                d = go
            elif op == SIGMOID:
                y = v[out]
                d = go * y * (1.0 - y)
            elif op == TANH:
                y = v[out]
                d = go * (1.0 - y * y)
            elif op == RELU:
                d = go * (v[a] > 0)
            else:  # LEAKY
                d = go * np.where(v[a] > 0, 1.0, LEAKY_SLOPE)
            g[a] = d if g[a] is None else g[a] + d
        gh_next = g[h_slot] if g[h_slot] is not None else np.zeros(hid)
        gc_next = g[c_slot] if g[c_slot] is not None else np.zeros(hid)
    grads = ParamStore()
    for op, out, args, W, b, bid in tape.bound:
        if op != LINEAR and op != LINEAR_B:
            continue
        if out in seen:
            G = np.array(seen[out][0])
            entry = {"W": G.T @ np.array(seen[out][1])}
            if b is not None:
                entry["b"] = G.sum(axis=0)
        else:
            entry = {"W": np.zeros_like(W)}
            if b is not None:
                entry["b"] = np.zeros_like(b)
        grads[bid] = entry
    return Gradients(grads, gh_next, gc_next)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 30
    clip: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


def _clip_factor(grads: ParamStore, clip: float | None) -> float:
    if clip is None:
        return 1.0
    norm = math.sqrt(grads.sq_norm())
    return clip / norm if norm > clip else 1.0


def sgd_step(params: ParamStore, grads: ParamStore, config: TrainConfig) -> ParamStore:
    """Return ``params - lr * clipped(grads)``; inputs are left untouched."""
    out = params.copy()
    _sgd_inplace(out, grads, config.learning_rate, config.clip)
    return out


def _sgd_inplace(params: ParamStore, grads: ParamStore, lr: float, clip: float | None):
    step = lr * _clip_factor(grads, clip)
    for k, g in grads.items():
        p = params[k]
        for n, a in g.items():
            p[n] -= step * a


def mse_loss(prediction, target) -> tuple[float, np.ndarray]:
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    d = p - t
    return float(np.mean(d * d)), 2.0 * d / d.size


# objective(program, params, sample) -> (loss, grads)
Objective = Callable[[CellProgram, ParamStore, object], tuple[float, ParamStore]]


def train(
    program: CellProgram,
    params: ParamStore,
    dataset: Sequence,
    config: TrainConfig,
    objective: Objective,
) -> tuple[ParamStore, list[float]]:
    """Plain per-sequence SGD, shuffling the dataset each epoch.

    Raises Diverged when a loss or gradient stops being finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    curve = []
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_loop(program, params, dataset, config, objective, rng, curve)


def _train_loop(program, params, dataset, config, objective, rng, curve):
    for epoch in range(config.epochs):
        total = 0.0
        for i in rng.permutation(len(dataset)):
            try:
                loss, grads = objective(program, params, dataset[i])
            except NonFiniteValue as exc:
                raise Diverged(f"epoch {epoch}: {exc}") from exc
            sq = grads.sq_norm()
            if not (math.isfinite(loss) and math.isfinite(sq)):
                raise Diverged(f"epoch {epoch}: non-finite loss or gradient")
            _sgd_inplace(params, grads, config.learning_rate, config.clip)
            total += loss
        curve.append(total / len(dataset))
    return params, curve
