import numpy as np
import pytest
from scipy.stats import unitary_group

from fbt.gateset import ideal_two_qubit_gateset


@pytest.fixture(scope="session")
def ideal():
    return ideal_two_qubit_gateset()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def brute_ptm(u):
    """Entry-by-entry Tr(P_i U P_j U^dag)/d, independent of the vectorized library path."""
    from fbt.pauli import pauli_matrix

    d = u.shape[0]
    n = int(np.log2(d))
    import itertools

    labels = ["".join(p) for p in itertools.product("IXYZ", repeat=n)]
    out = np.zeros((d * d, d * d))
    for i, li in enumerate(labels):
        for j, lj in enumerate(labels):
            pi, pj = pauli_matrix(li), pauli_matrix(lj)
            out[i, j] = np.trace(pi @ u @ pj @ u.conj().T).real / d
    return out


def random_unitary(d, seed):
    return unitary_group.rvs(d, random_state=seed)


def random_channel(rng, d=4, n_kraus=3, strength=1.0):
    """Random CPTP map in Kraus form, mixed toward identity by ``1 - strength``."""
    g = rng.normal(size=(n_kraus * d, d)) + 1j * rng.normal(size=(n_kraus * d, d))
    q, _ = np.linalg.qr(g)
    ks = [q[k * d : (k + 1) * d] for k in range(n_kraus)]
    ks = [np.sqrt(strength) * k for k in ks]
    ks.append(np.sqrt(1 - strength) * np.eye(d))
    return ks


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
