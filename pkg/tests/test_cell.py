import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from helpers import gradient_check, oracle_max_error, random_params, sample_architectures
from cellevo.cell import (
    CellDims,
    Diverged,
    NonFiniteValue,
    ParamStore,
    ShapeError,
    StepState,
    TrainConfig,
    compile,
    forward_step,
    init_params,
    mse_loss,
    param_count,
    sgd_step,
    train,
    unroll,
)
from cellevo.encoding import Activation, encode_basic_rnn, encode_gru, encode_lstm
from cellevo.morphism import add_unit
from cellevo.tasks import READOUT, init_task_params, sequence_objective, task_dims


@pytest.mark.parametrize("name", ["basic_rnn", "lstm", "gru"])
def test_seed_cells_match_closed_form(name, rng):
    assert oracle_max_error(name, 30, rng) < 1e-12


def test_basic_rnn_zero_params_and_state():
    program = compile(encode_basic_rnn(), CellDims(3, 4))
    params = random_params(program, np.random.default_rng(0))
    for entry in params.values():
        for a in entry.values():
            a[...] = 0
    s, _ = forward_step(program, params, np.ones(3), StepState.zeros(4))
    assert np.array_equal(s.h, np.zeros(4))


def test_lstm_initial_output_bounded(rng):
    program = compile(encode_lstm(), CellDims(4, 6))
    params = random_params(program, rng, scale=3.0)
    s, _ = forward_step(program, params, rng.normal(size=4), StepState.zeros(6))
    assert np.all(np.abs(s.h) <= 1.0)


def test_param_counts():
    dims = CellDims(4, 8)
    assert param_count(compile(encode_basic_rnn(), dims)) == (8 * 4 + 8) + (8 * 8 + 8)
    assert param_count(compile(encode_lstm(), dims)) == 4 * (8 * 4 + 8 + 8 * 8)
    assert param_count(compile(encode_gru(), dims)) == 2 * (8 * 4 + 8 + 8 * 8) + 8 * 4 + 8 * 8


def test_width_mismatch_rejected():
    program = compile(encode_basic_rnn(), CellDims(3, 4))
    params = random_params(program, np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward_step(program, params, np.ones(5), StepState.zeros(4))


def test_nonfinite_state_raises():
    program = compile(encode_basic_rnn(), CellDims(2, 2))
    params = random_params(program, np.random.default_rng(0))
    params[4]["W"][:] = np.nan
    with pytest.raises(NonFiniteValue):
        forward_step(program, params, np.ones(2), StepState.zeros(2))


def test_inherited_shape_mismatch():
    program = compile(encode_basic_rnn(), CellDims(3, 4))
    bad = ParamStore({4: {"W": np.zeros((4, 5)), "b": np.zeros(4)}})
    with pytest.raises(ShapeError):
        init_params(program, np.random.default_rng(0), inherited=bad)


@pytest.mark.parametrize("encode", [encode_basic_rnn, encode_lstm, encode_gru])
def test_seed_gradients(encode, rng):
    assert gradient_check(encode(), rng, hidden=4, length=4) < 1e-4


def test_random_architecture_gradients(rng):
    for arch in sample_architectures(6, rng):
        assert gradient_check(arch, rng) < 1e-4


def test_sequence_objective_gradient(rng):
    program = compile(encode_gru(), task_dims(3))
    params = init_task_params(program, rng)
    for entry in params.values():
        for a in entry.values():
            a += rng.normal(0, 0.3, size=a.shape)
    loss, grads = sequence_objective(program, params, "aabbcc")
    numeric = oracles.central_difference(lambda: sequence_objective(program, params, "aabbcc")[0], params)
    for k in numeric:
        for n in numeric[k]:
            np.testing.assert_allclose(grads[k][n], numeric[k][n], rtol=1e-5, atol=1e-9)
    assert set(grads) == set(params)
    assert READOUT in grads


def test_inheritance_copies_surviving_blocks(rng):
    parent = encode_basic_rnn()
    child, _ = add_unit(parent, rng, target=7, position=0, activation=Activation.TANH)
    dims = CellDims(3, 4)
    pp = random_params(compile(parent, dims), rng)
    cp = init_params(compile(child, dims), rng, inherited=pp)
    for bid in pp:
        for n in pp[bid]:
            assert np.array_equal(cp[bid][n], pp[bid][n])
            assert cp[bid][n] is not pp[bid][n]


@pytest.mark.parametrize("act", [Activation.IDENTITY, Activation.LINEAR, Activation.LINEAR_B])
def test_identity_like_insertion_preserves_function(act, rng):
    parent = encode_lstm()
    dims = CellDims(3, 5)
    pp = random_params(compile(parent, dims), rng)
    xs = rng.normal(size=(6, 3))
    base, _ = unroll(compile(parent, dims), pp, xs)
    for target in (7, 22, 25, 26):
        child, _ = add_unit(parent, rng, target=target, position=0, activation=act)
        prog = compile(child, dims)
        states, _ = unroll(prog, init_params(prog, rng, inherited=pp), xs)
        for u, v in zip(base, states):
            assert np.max(np.abs(u.h - v.h)) < 1e-12
            assert np.max(np.abs(u.c - v.c)) < 1e-12


def test_sgd_step_returns_copy():
    p = ParamStore({1: {"W": np.ones((2, 2))}})
    g = ParamStore({1: {"W": np.full((2, 2), 10.0)}})
    new = sgd_step(p, g, TrainConfig(learning_rate=0.1, clip=None))
    assert np.allclose(new[1]["W"], 0.0)
    assert np.allclose(p[1]["W"], 1.0)


def test_sgd_clipping_bounds_step():
    p = ParamStore({1: {"W": np.zeros((1, 1))}})
    g = ParamStore({1: {"W": np.full((1, 1), 100.0)}})
    new = sgd_step(p, g, TrainConfig(learning_rate=1.0, clip=5.0))
    assert new[1]["W"][0, 0] == pytest.approx(-5.0)


def test_mse_loss():
    loss, grad = mse_loss([1.0, 2.0], [1.0, 0.0])
    assert loss == pytest.approx(2.0)
    assert np.allclose(grad, [0.0, 2.0])
    with pytest.raises(ValueError):
        mse_loss([1.0], [1.0, 2.0])


def test_training_reduces_loss(rng):
    program = compile(encode_basic_rnn(), task_dims(6))
    params = init_task_params(program, rng)
    data = ["abc", "aabbcc", "aaabbbccc"] * 4
    _, curve = train(program, params, data, TrainConfig(1.0, 15, 5.0, 0), sequence_objective)
    assert curve[-1] < 0.8 * curve[0]


def test_training_is_deterministic(rng):
    program = compile(encode_gru(), task_dims(4))
    params = init_task_params(program, rng)
    data = ["abc", "aabbcc"] * 3
    a, ca = train(program, params, data, TrainConfig(0.5, 3, 5.0, 7), sequence_objective)
    b, cb = train(program, params, data, TrainConfig(0.5, 3, 5.0, 7), sequence_objective)
    assert ca == cb and a.allclose(b)


def test_divergence_is_reported(rng):
    program = compile(encode_basic_rnn(), task_dims(4))
    params = init_task_params(program, rng)

    def exploding(program, params, sample):
        return float("nan"), params.zeros_like()

    with pytest.raises(Diverged):
        train(program, params, ["abc"], TrainConfig(0.1, 1), exploding)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unroll_matches_repeated_forward_step(seed):
    rng = np.random.default_rng(seed)
    arch = sample_architectures(1, rng)[0]
    program = compile(arch, CellDims(3, 4))
    params = random_params(program, rng)
    xs = rng.normal(size=(4, 3))
    states, _ = unroll(program, params, xs)
    s = StepState.zeros(4)
    for x, want in zip(xs, states):
        s, _ = forward_step(program, params, x, s)
        assert np.array_equal(s.h, want.h) and np.array_equal(s.c, want.c)


def test_gradient_check_detects_wrong_gradient(rng, monkeypatch):
    import helpers

    real = helpers.backward

    def skewed(tape, seeds):
        out = real(tape, seeds)
        for entry in out.params.values():
            for a in entry.values():
                a *= 1.001
        return out

    monkeypatch.setattr(helpers, "backward", skewed)
    assert gradient_check(encode_lstm(), rng, hidden=3, length=3) > 5e-4
