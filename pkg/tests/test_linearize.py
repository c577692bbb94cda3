import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbt.gateset import outcome_probability
from fbt.linearize import (
    BLOCK,
    Registry,
    batch_outcomes,
    gateset_from_residual,
    linear_prediction,
    linearize,
    residual_from_gateset,
    unvec,
    vec,
)

from oracles import GATES, linearization_error_ratio, random_residual


def matrix_form_shift(gs, seq, eps):
    """First-order shift summed position by position, written with explicit products."""
    e = gs.effect() @ gs.spam_noise["E"]
    rho = gs.spam_noise["rho"] @ gs.rho0
    noisy = [gs.noise[g] @ gs.ideal[g] for g in seq]
    total = gs.effect() @ eps["E"] @ _apply(noisy, rho)
    total += e @ _apply(noisy, eps["rho"] @ gs.rho0)
    for p, g in enumerate(seq):
        before = _apply(noisy[:p], rho)
        after = noisy[p + 1 :]
        total += e @ _apply(after, eps[g] @ gs.ideal[g] @ before)
    return total


def _apply(ops, v):
    for op in ops:
        v = op @ v
    return v


def test_registry_layout(ideal):
    reg = Registry.for_gateset(ideal)
    assert reg.length == 1792
    starts = [o for _, o, _ in reg.entries]
    assert starts == list(range(0, 1792, BLOCK))
    assert reg.owners[-2:] == ("E", "rho")
    with pytest.raises(KeyError):
        reg.offset("x9")


def test_vec_convention():
    m = np.arange(256.0).reshape(16, 16)
    np.testing.assert_array_equal(unvec(vec(m)), m)
    v = vec(np.eye(16))
    assert set(np.flatnonzero(v)) == set(range(0, 256, 17))
    with pytest.raises(ValueError):
        unvec(np.zeros(15))


def test_empty_sequence_touches_only_spam(ideal):
    lin = linearize(ideal, [])
    reg = Registry.for_gateset(ideal)
    assert lin.m_bar == pytest.approx(ideal.effect() @ ideal.rho0)
    for g in GATES:
        assert not np.any(lin.a_row[reg.slice(g)])
    assert np.any(lin.a_row[reg.slice("E")])
    assert np.any(lin.a_row[reg.slice("rho")])


def test_single_gate_block_is_kronecker_product(ideal):
    lin = linearize(ideal, ["x1"])
    reg = Registry.for_gateset(ideal)
    e = ideal.effect()
    state = ideal.ideal["x1"] @ ideal.rho0
    expected = np.zeros(256)
    for i in range(16):
        for j in range(16):
            expected[i * 16 + j] = e[i] * state[j]
    np.testing.assert_allclose(lin.a_row[reg.slice("x1")], expected, atol=1e-15)


def test_sensitivity_matches_matrix_form(ideal, rng):
    reg = Registry.for_gateset(ideal)
    mean = gateset_from_residual(ideal, random_residual(rng, reg, 0.05))
    seq = list(rng.choice(GATES, size=12))
    x = random_residual(rng, reg, 1e-3)
    eps = {o: x[reg.slice(o)].reshape(16, 16) for o in reg.owners}
    lin = linearize(mean, seq)
    assert lin.a_row @ x == pytest.approx(matrix_form_shift(mean, seq, eps), abs=1e-14)


def test_repeated_gate_blocks_accumulate(ideal):
    reg = Registry.for_gateset(ideal)
    k = 5
    lin = linearize(ideal, ["x2"] * k)
    total = np.zeros(256)
    for p in range(k):
        for idx in range(256):
            eps_pos = np.zeros(256)
            eps_pos[idx] = 1.0
            # only position p carries the perturbation
            e = ideal.effect()
            after = [ideal.ideal["x2"]] * (k - p - 1)
            before = _apply([ideal.ideal["x2"]] * p, ideal.rho0)
            total[idx] += e @ _apply(after, unvec(eps_pos) @ ideal.ideal["x2"] @ before)
    np.testing.assert_allclose(lin.a_row[reg.slice("x2")], total, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 16))
def test_directional_derivative(seed, length):
    from fbt.gateset import ideal_two_qubit_gateset

    rng = np.random.default_rng(seed)
    gs = ideal_two_qubit_gateset()
    reg = Registry.for_gateset(gs)
    seq = list(rng.choice(GATES, size=length))
    x = random_residual(rng, reg, 1e-4)
    lin = linearize(gs, seq)
    exact = outcome_probability(gateset_from_residual(gs, x), seq)
    assert abs(exact - (lin.m_bar + lin.a_row @ x)) <= 1e-6


def test_linear_model_is_linear(ideal, rng):
    reg = Registry.for_gateset(ideal)
    lin = linearize(ideal, ["x1", "cz", "x2"])
    x = random_residual(rng, reg, 1e-2)
    x0 = np.zeros(reg.length)
    d1 = linear_prediction(lin, x, x0) - lin.m_bar
    d2 = linear_prediction(lin, 2 * x, x0) - lin.m_bar
    assert d2 == pytest.approx(2 * d1, rel=1e-14)


def test_batch_outcomes_match_exact(ideal, rng):
    reg = Registry.for_gateset(ideal)
    xs = np.array([random_residual(rng, reg, 1e-2) for _ in range(5)])
    seq = ["x1", "z2", "cz", "x2"]
    got = batch_outcomes(ideal, xs, seq)
    want = [outcome_probability(gateset_from_residual(ideal, x), seq) for x in xs]
    np.testing.assert_allclose(got, want, atol=1e-14)
    np.testing.assert_allclose(residual_from_gateset(gateset_from_residual(ideal, xs[0])), xs[0], atol=1e-15)


def test_quadratic_error_scaling():
    assert 50 <= linearization_error_ratio() <= 200
