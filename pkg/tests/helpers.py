"""Shared routines for the unit and acceptance suites."""

from __future__ import annotations

from collections import Counter

import numpy as np

import oracles
from cellevo.cell import (
    CellDims,
    ParamStore,
    StepState,
    backward,
    compile,
    forward_step,
    init_params,
    unroll,
)
from cellevo.encoding import BlockKind, block_count, encode_basic_rnn, encode_gru, encode_lstm, validate
from cellevo.morphism import (
    ALL_KINDS,
    BLOCK_DELTA,
    IdentifierPool,
    NotApplicable,
    add_unit,
    apply,
    generate_offspring,
    random_initial_architecture,
)
from cellevo.nsga import Individual, fast_nondominated_sort, survivor_selection

SEED_ORACLES = {
    "basic_rnn": (encode_basic_rnn, oracles.basic_rnn),
    "lstm": (encode_lstm, oracles.lstm),
    "gru": (encode_gru, oracles.gru),
}


def random_params(program, rng, scale=1.0) -> ParamStore:
    """Dense random parameters, biases included (unlike the zero-bias default init)."""
    store = ParamStore()
    for bid, (shape, bias) in program.weight_shapes.items():
        entry = {"W": rng.normal(0, scale, size=shape)}
        if bias:
            entry["b"] = rng.normal(0, scale, size=shape[0])
        store[bid] = entry
    return store


def oracle_max_error(name: str, trials: int, rng) -> float:
    """Largest |compiled - closed form| over random params and inputs."""
    encode, oracle = SEED_ORACLES[name]
    arch = encode()
    worst = 0.0
    for _ in range(trials):
        inp, hid = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        program = compile(arch, CellDims(inp, hid))
        params = random_params(program, rng)
        x, h, c = rng.normal(size=inp), rng.normal(size=hid), rng.normal(size=hid)
        got, _ = forward_step(program, params, x, StepState(h, c))
        want_h, want_c = oracle(x, h, c, params)
        worst = max(worst, float(np.max(np.abs(got.h - want_h))), float(np.max(np.abs(got.c - want_c))))
    return worst


def sample_architectures(count: int, rng):
    """Random initial architectures, some pushed through extra (incl. destructive) morphisms."""
    pool = IdentifierPool()
    out = []
    for n in range(count):
        arch = random_initial_architecture(rng, pool)
        if n % 2:
            arch, _ = generate_offspring(arch, 3, rng, pool)
        out.append(arch)
    return out


def relative_error(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


FD_STEPS = (1e-5, 1e-4, 1e-6)
STATE_BOUND = 1e3


def gradient_check(arch, rng, hidden=None, length=None, steps=FD_STEPS) -> float:
    """Worst relative error between backward() and central differences.

    The loss is a random linear functional of every h_t and c_t plus a
    quadratic term on the last hidden state.  Trials whose states leave
    [-STATE_BOUND, STATE_BOUND] are redrawn.  Each entry is compared with
    central differences at several step sizes and the best match counts:
    a wrong gradient disagrees at every step, while cancellation noise (on
    exactly-zero gradients) and relu kinks only spoil some of them.
    """
    fixed_hidden, fixed_length = hidden, length
    while True:
        hidden = fixed_hidden or int(rng.integers(2, 9))
        length = fixed_length or int(rng.integers(1, 7))
        program = compile(arch, CellDims(3, hidden))
        params = random_params(program, rng, scale=0.5)
        xs = rng.normal(size=(length, 3))
        a = rng.normal(size=(length, hidden))
        b = rng.normal(size=(length, hidden))
        # a zero initial state would park every relu reading h or c on its kink
        start = StepState(rng.normal(size=hidden), rng.normal(size=hidden))
        states, _ = unroll(program, params, xs, start)
        # self-products can blow states past where a perturbation changes the loss at all
        if max(max(np.abs(s.h).max(), np.abs(s.c).max()) for s in states) <= STATE_BOUND:
            break

    def loss():
        states, _ = unroll(program, params, xs, start)
        total = sum(a[t] @ s.h + b[t] @ s.c for t, s in enumerate(states))
        return float(total + 0.5 * states[-1].h @ states[-1].h)

    states, tape = unroll(program, params, xs, start)
    seeds = [(a[t].copy(), b[t].copy()) for t in range(length)]
    seeds[-1] = (seeds[-1][0] + states[-1].h, seeds[-1][1])
    grads = backward(tape, seeds).params
    errors = None
    for eps in steps:
        numeric = oracles.central_difference(loss, params, eps)
        errs = {(k, n): relative_error(grads[k][n], fd) for k, entry in numeric.items() for n, fd in entry.items()}
        errors = errs if errors is None else {key: np.minimum(errors[key], e) for key, e in errs.items()}
    return max((float(e.max(initial=0.0)) for e in errors.values()), default=0.0)


def preserved_output_error(parent, child, rng, hidden=4, length=5) -> float:
    """Max output difference between parent and child with inherited parameters."""
    dims = CellDims(3, hidden)
    pp = compile(parent, dims)
    parent_params = random_params(pp, rng)
    cp = compile(child, dims)
    child_params = init_params(cp, rng, inherited=parent_params)
    xs = rng.normal(size=(length, 3))
    s1, _ = unroll(pp, parent_params, xs)
    s2, _ = unroll(cp, child_params, xs)
    return max(max(float(np.max(np.abs(u.h - v.h))), float(np.max(np.abs(u.c - v.c)))) for u, v in zip(s1, s2))


# block-kind deltas each transformation must produce: (activation, combination)
KIND_DELTA = {
    "add_unit": (1, 0),
    "remove_unit": (-1, 0),
    "add_connection": (0, 1),
    "remove_connection": (0, -1),
    "add_recurrent_connection": (0, 1),
    "change_activation": (0, 0),
    "change_combination": (0, 0),
}


def _kind_counts(arch):
    acts = sum(1 for b in arch.blocks.values() if b.kind is BlockKind.ACTIVATION)
    combs = sum(1 for b in arch.blocks.values() if b.kind is BlockKind.COMBINATION)
    return acts, combs


def morphism_closure(applications: int, rng, pool_size: int = 64) -> dict:
    """Apply random transformations to a drifting pool of architectures.

    Runs until ``applications`` transformations have actually applied.
    Returns counts of validation failures and block-count delta mismatches,
    plus applied and not-applicable draws per transformation kind.
    """
    ids = IdentifierPool()
    pool = [random_initial_architecture(rng, ids) for _ in range(pool_size - 3)]
    pool += [encode_basic_rnn(), encode_lstm(), encode_gru()]
    stats = {"failures": 0, "delta_errors": 0, "applied": Counter(), "skipped": Counter()}
    done = 0
    while done < applications:
        slot = int(rng.integers(len(pool)))
        arch = pool[slot]
        kind = ALL_KINDS[int(rng.integers(len(ALL_KINDS)))]
        try:
            child, step = apply(kind, arch, rng)
        except NotApplicable:
            stats["skipped"][kind.value] += 1
            continue
        stats["applied"][kind.value] += 1
        done += 1
        if not validate(child).ok:
            stats["failures"] += 1
            continue
        da = np.subtract(_kind_counts(child), _kind_counts(arch))
        if block_count(child) - block_count(arch) != BLOCK_DELTA[kind] or tuple(da) != KIND_DELTA[kind.value]:
            stats["delta_errors"] += 1
        pool[slot] = child
    return stats


def preservation_trial(rng, activation) -> float:
    """Insert an identity-like unit into a random architecture and measure the output change."""
    arch = sample_architectures(1, rng)[0]
    child, _ = add_unit(arch, rng, activation=activation)
    return preserved_output_error(arch, child, rng)


def random_population(rng, size=None, m=None):
    size = size or int(rng.integers(1, 65))
    m = m or int(rng.integers(2, 5))
    # small integer grids force plenty of ties and duplicates
    vals = rng.integers(0, 6, size=(size, m)).astype(float)
    return [Individual(f"i{k:02d}", tuple(v)) for k, v in enumerate(vals)]


def nsga_oracle_check(populations: int, rng) -> dict:
    """Compare the sort with brute-force layering and check survivor selection."""
    out = {"sort_mismatches": 0, "size_errors": 0, "f1_lost": 0}
    for _ in range(populations):
        pop = random_population(rng)
        fronts = fast_nondominated_sort(pop)
        got = [{int(i.identifier[1:]) for i in f} for f in fronts]
        if got != oracles.layer_fronts([p.objectives for p in pop]):
            out["sort_mismatches"] += 1
        n = int(rng.integers(1, len(pop) + 1))
        survivors = survivor_selection(pop, n)
        if len(survivors) != n or len({id(s) for s in survivors}) != n:
            out["size_errors"] += 1
        if len(fronts[0]) <= n and not {id(i) for i in fronts[0]} <= {id(s) for s in survivors}:
            out["f1_lost"] += 1
    return out
