"""Pauli bases, Pauli transfer matrices and Choi matrices.

Conventions used everywhere in the package:

* Pauli strings are ordered lexicographically over ``I, X, Y, Z`` with the
  qubit-1 letter first, so ``"ZI"`` is Z on qubit 1 and ``"IZ"`` is Z on
  qubit 2.  The qubit-1 factor is the left Kronecker factor.
* The operator basis is normalized: ``B_i = P_i / sqrt(d)``, so
  ``Tr(B_i B_j) = delta_ij``.  Operators are vectorized as
  ``vec(A)_i = Tr(B_i A)``; a density matrix therefore has first component
  ``1/sqrt(d)``, and ``<<E|rho>> = Tr(E rho)``.
* A PTM has entries ``R_ij = Tr(B_i Phi(B_j)) = Tr(P_i Phi(P_j)) / d``.
* The Choi matrix is ``J = sum_kl |k><l| (x) Phi(|k><l|)`` (input factor
  first).  It has trace ``d`` for trace-preserving maps, the identity channel
  maps to ``|Omega><Omega|`` with ``|Omega> = sum_k |kk>``, and the fully
  depolarizing channel maps to ``I / d``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

PAULI_LETTERS = "IXYZ"

_SINGLE = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def pauli_matrix(label: str) -> np.ndarray:
    """Unnormalized Pauli operator for a string such as ``"XZ"``."""
    out = np.eye(1, dtype=complex)
    for ch in label:
        out = np.kron(out, _SINGLE[ch])
    return out


@dataclass(frozen=True)
class PauliBasis:
    """Normalized n-qubit Pauli operator basis."""

    n_qubits: int
    labels: tuple[str, ...]
    matrices: np.ndarray  # (d^2, d, d), normalized P / sqrt(d)

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def unnormalized(self) -> np.ndarray:
        return self.matrices * np.sqrt(self.dim)


@lru_cache(maxsize=None)
def pauli_basis(n_qubits: int = 2) -> PauliBasis:
    if n_qubits < 1:
        raise ValueError("n_qubits must be positive")
    labels = tuple("".join(p) for p in itertools.product(PAULI_LETTERS, repeat=n_qubits))
    d = 2**n_qubits
    mats = np.array([pauli_matrix(lab) for lab in labels]) / np.sqrt(d)
    mats.setflags(write=False)
    return PauliBasis(n_qubits, labels, mats)


def _basis_for_dim(d: int) -> PauliBasis:
    n = int(round(np.log2(d)))
    if 2**n != d:
        raise ValueError(f"Hilbert dimension {d} is not a power of two")
    return pauli_basis(n)


def _basis_for_superdim(dim: int) -> PauliBasis:
    d = int(round(np.sqrt(dim)))
    if d * d != dim:
        raise ValueError(f"superoperator dimension {dim} is not a square")
    return _basis_for_dim(d)


def vectorize(op: np.ndarray) -> np.ndarray:
    """Pauli-basis coordinates ``Tr(B_i A)`` of an operator (real if A is Hermitian)."""
    op = np.asarray(op)
    basis = _basis_for_dim(op.shape[0])
    coords = np.einsum("kij,ji->k", basis.matrices, op)
    if np.allclose(coords.imag, 0.0, atol=1e-12):
        return coords.real
    return coords


def devectorize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec)
    basis = _basis_for_superdim(vec.shape[0])
    return np.einsum("k,kij->ij", vec, basis.matrices)


def ptm_from_superop(channel, d: int) -> np.ndarray:
    """PTM of a linear map given as a python callable acting on d x d matrices."""
    basis = _basis_for_dim(d)
    out = np.empty((basis.size, basis.size))
    for j, bj in enumerate(basis.matrices):
        image = channel(bj)
        out[:, j] = np.einsum("kij,ji->k", basis.matrices, image).real
    return out


def ptm_from_unitary(u: np.ndarray, atol: float = 1e-10) -> np.ndarray:
    """PTM of the unitary channel ``rho -> U rho U^dagger``."""
    u = np.asarray(u, dtype=complex)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {u.shape}")
    err = np.linalg.norm(u.conj().T @ u - np.eye(u.shape[0]))
    if err > atol:
        raise ValueError(f"matrix is not unitary: ||U^dag U - I||_F = {err:.3e}")
    basis = _basis_for_dim(u.shape[0])
    b = basis.matrices
    images = u @ b @ u.conj().T
    # R_ij = Tr(B_i U B_j U^dag)
    return np.einsum("iab,jba->ij", b, images).real


def ptm_from_kraus(kraus: list[np.ndarray]) -> np.ndarray:
    d = kraus[0].shape[0]
    return ptm_from_superop(lambda x: sum(k @ x @ k.conj().T for k in kraus), d)


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel ``a`` after channel ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.shape[0] != a.shape[1]:
        raise ValueError(f"cannot compose PTMs of shapes {a.shape} and {b.shape}")
    return a @ b


def compose_sequence(ptms) -> np.ndarray:
    """Product of PTMs applied in list order (first element acts first)."""
    ptms = list(ptms)
    out = np.eye(ptms[0].shape[0])
    for r in ptms:
        out = compose(r, out)
    return out


@lru_cache(maxsize=None)
def _choi_kernel(dim: int) -> np.ndarray:
    """K[i, j] = B_j^T (x) B_i, stacked as (dim, dim, D, D)."""
    basis = _basis_for_superdim(dim)
    b = basis.matrices
    kern = np.einsum("jba,icd->ijacbd", b, b)
    d = b.shape[1]
    kern = kern.reshape(dim, dim, d * d, d * d)
    kern.setflags(write=False)
    return kern


def ptm_to_choi(r: np.ndarray) -> np.ndarray:
    """Choi matrix ``J = sum_ij R_ij B_j^T (x) B_i``; accepts a stack (..., D, D)."""
    r = np.asarray(r)
    kern = _choi_kernel(r.shape[-1])
    return np.tensordot(r, kern, axes=([-2, -1], [0, 1]))


def choi_to_ptm(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c)
    dim = c.shape[-1]
    kern = _choi_kernel(dim)
    # R_ij = Tr((B_j^T (x) B_i)^dag J); the kernel entries are Hermitian.
    flat = np.swapaxes(c, -1, -2).reshape(c.shape[:-2] + (dim * dim,))
    return (flat @ kern.reshape(dim * dim, dim * dim).T).real.reshape(c.shape[:-2] + (dim, dim))


def is_trace_preserving(r: np.ndarray, atol: float = 1e-12) -> bool:
    e0 = np.zeros(r.shape[0])
    e0[0] = 1.0
    return bool(np.allclose(r[0], e0, atol=atol))


def min_choi_eigenvalue(r: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(ptm_to_choi(r)).min())


def depolarizing_ptm(p: float, dim: int = 16) -> np.ndarray:
    """``(1-p) rho + p Tr(rho) I/d``: diag(1, 1-p, ..., 1-p)."""
    r = np.eye(dim) * (1.0 - p)
    r[0, 0] = 1.0
    return r
