import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbt.pauli import (
    choi_to_ptm,
    compose,
    compose_sequence,
    depolarizing_ptm,
    devectorize,
    is_trace_preserving,
    pauli_basis,
    pauli_matrix,
    ptm_from_kraus,
    ptm_from_unitary,
    ptm_to_choi,
    vectorize,
)

from conftest import brute_ptm, random_channel, random_unitary

X = pauli_matrix("X")


def rx_half():
    return np.cos(np.pi / 4) * np.eye(2) - 1j * np.sin(np.pi / 4) * X


def test_basis_orthonormal_and_ordered():
    b = pauli_basis(2)
    assert b.labels[:5] == ("II", "IX", "IY", "IZ", "XI")
    gram = np.einsum("iab,jba->ij", b.matrices, b.matrices)
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-15)
    # qubit-1 letter is the left Kronecker factor
    np.testing.assert_array_equal(pauli_matrix("ZI"), np.kron(pauli_matrix("Z"), np.eye(2)))


def test_density_matrix_vector_has_trace_component():
    rho = np.diag([1.0, 0, 0, 0])
    v = vectorize(rho)
    assert v[0] == pytest.approx(0.5)
    np.testing.assert_allclose(devectorize(v), rho, atol=1e-15)


def test_identity_unitary_gives_identity_ptm():
    np.testing.assert_allclose(ptm_from_unitary(np.eye(4)), np.eye(16), atol=1e-15)


def test_x_half_on_qubit2_matches_brute_force():
    u = np.kron(np.eye(2), rx_half())
    r = ptm_from_unitary(u)
    np.testing.assert_allclose(r, brute_ptm(u), atol=1e-12)
    b = pauli_basis(2)
    iy, iz, ix = b.index("IY"), b.index("IZ"), b.index("IX")
    assert r[iz, iy] == pytest.approx(1.0)
    assert r[iy, iz] == pytest.approx(-1.0)
    assert r[ix, ix] == pytest.approx(1.0)
    assert r[0, 0] == pytest.approx(1.0)


def test_cz_maps_xi_to_xz():
    cz = np.diag([1, 1, 1, -1]).astype(complex)
    r = ptm_from_unitary(cz)
    np.testing.assert_allclose(r, brute_ptm(cz), atol=1e-12)
    b = pauli_basis(2)
    assert r[b.index("XZ"), b.index("XI")] == pytest.approx(1.0)


def test_non_unitary_rejected():
    with pytest.raises(ValueError, match="not unitary"):
        ptm_from_unitary(np.diag([1.0, 0.5]))


def test_compose_order_and_identity():
    a = ptm_from_unitary(random_unitary(4, 1))
    np.testing.assert_allclose(compose(a, np.eye(16)), a)
    xh = ptm_from_unitary(np.kron(np.eye(2), rx_half()))
    xpi = ptm_from_unitary(np.kron(np.eye(2), rx_half() @ rx_half()))
    np.testing.assert_allclose(compose(xh, xh), xpi, atol=1e-12)
    with pytest.raises(ValueError):
        compose(np.eye(4), np.eye(16))


def test_compose_sequence_matches_unitary_product():
    us = [random_unitary(4, s) for s in range(4)]
    total = us[3] @ us[2] @ us[1] @ us[0]
    got = compose_sequence([ptm_from_unitary(u) for u in us])
    np.testing.assert_allclose(got, ptm_from_unitary(total), atol=1e-10)


def test_ptm_of_unitary_is_orthogonal_and_unital():
    r = ptm_from_unitary(random_unitary(4, 7))
    np.testing.assert_allclose(r.T @ r, np.eye(16), atol=1e-10)
    assert is_trace_preserving(r)
    np.testing.assert_allclose(r[:, 0], np.eye(16)[0], atol=1e-12)


def test_choi_conventions():
    omega = np.zeros(16)
    for k in range(4):
        omega[5 * k] = 1.0
    np.testing.assert_allclose(ptm_to_choi(np.eye(16)), np.outer(omega, omega), atol=1e-12)
    np.testing.assert_allclose(ptm_to_choi(depolarizing_ptm(1.0)), np.eye(16) / 4, atol=1e-12)
    assert np.trace(ptm_to_choi(ptm_from_unitary(random_unitary(4, 3)))).real == pytest.approx(4.0)


def test_unitary_choi_is_rank_one():
    w = np.linalg.eigvalsh(ptm_to_choi(ptm_from_unitary(random_unitary(4, 11))))
    assert w[-1] == pytest.approx(4.0)
    assert abs(w[-2]) < 1e-10


def test_depolarizing_formula_matches_kraus():
    p = 0.07
    ps = [pauli_matrix(lab) for lab in pauli_basis(2).labels]
    # (1-p) rho + p I/d  =  (1 - 15p/16) rho + p/16 sum_{P != I} P rho P
    kraus = [np.sqrt(1 - 15 * p / 16) * ps[0]] + [np.sqrt(p / 16) * q for q in ps[1:]]
    np.testing.assert_allclose(ptm_from_kraus(kraus), depolarizing_ptm(p), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1))
def test_ptm_is_a_homomorphism(s1, s2):
    u, v = random_unitary(4, s1), random_unitary(4, s2)
    np.testing.assert_allclose(
        ptm_from_unitary(u @ v), ptm_from_unitary(u) @ ptm_from_unitary(v), atol=1e-10
    )


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_choi_round_trip_and_positivity(seed, strength):
    rng = np.random.default_rng(seed)
    r = ptm_from_kraus(random_channel(rng, strength=strength))
    c = ptm_to_choi(r)
    np.testing.assert_allclose(choi_to_ptm(c), r, atol=1e-12)
    np.testing.assert_allclose(c, c.conj().T, atol=1e-12)
    assert np.linalg.eigvalsh(c).min() > -1e-10
    assert is_trace_preserving(r, atol=1e-10)
