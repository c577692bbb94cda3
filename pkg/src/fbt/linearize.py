"""First-order expansion of sequence outcomes in the noise residuals.

The residual vector stacks ``vec(eps_g)`` for every gate in registry order,
then ``vec(eps_E)`` and ``vec(eps_rho)``; each channel is
``Lambda = I + eps``.  ``vec`` is row-major: ``vec(M)[i*D + j] = M[i, j]``.

For a sequence ``g_1 ... g_N`` the outcome is
``m = e . L_N G_N ... L_1 G_1 . r`` with ``e = <<E| Lambda_E`` and
``r = Lambda_rho |rho>>``.  The derivative with respect to the channel at
position p is ``outer(left_p, G_p right_{p-1})``, where ``left_p`` is the row
vector of everything applied after that channel and ``right_{p-1}`` the
state before the gate.  Prefix and suffix products are cached so a sequence
costs O(N) matrix-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gateset import DIM, SPAM_LABELS, NoisyGateSet

BLOCK = DIM * DIM


def vec(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"vec expects a matrix, got shape {m.shape}")
    return m.reshape(-1).copy()


def unvec(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    v = np.asarray(v)
    n = v.shape[-1]
    dim = dim or int(round(np.sqrt(n)))
    if dim * dim != n:
        raise ValueError(f"cannot unvec length {n} into a square matrix")
    return v.reshape(v.shape[:-1] + (dim, dim)).copy()


@dataclass(frozen=True)
class Registry:
    """Ordered (owner, offset, length) blocks of the residual vector."""

    owners: tuple[str, ...]

    @classmethod
    def for_gateset(cls, gs: NoisyGateSet) -> "Registry":
        return cls(tuple(gs.labels) + SPAM_LABELS)

    @property
    def length(self) -> int:
        return BLOCK * len(self.owners)

    @property
    def entries(self) -> list[tuple[str, int, int]]:
        return [(o, k * BLOCK, BLOCK) for k, o in enumerate(self.owners)]

    def offset(self, owner: str) -> int:
        try:
            return self.owners.index(owner) * BLOCK
        except ValueError:
            raise KeyError(f"owner {owner!r} not in registry") from None

    def slice(self, owner: str) -> slice:
        o = self.offset(owner)
        return slice(o, o + BLOCK)

    @property
    def gates(self) -> tuple[str, ...]:
        return tuple(o for o in self.owners if o not in SPAM_LABELS)


def residual_from_gateset(gs: NoisyGateSet, registry: Registry | None = None) -> np.ndarray:
    registry = registry or Registry.for_gateset(gs)
    x = np.empty(registry.length)
    eye = np.eye(DIM)
    for owner in registry.owners:
        ch = gs.spam_noise[owner] if owner in SPAM_LABELS else gs.noise[owner]
        x[registry.slice(owner)] = (ch - eye).ravel()
    return x


def gateset_from_residual(template: NoisyGateSet, x: np.ndarray, registry: Registry | None = None) -> NoisyGateSet:
    """Copy of ``template`` whose noise channels are ``I + unvec(x_block)``."""
    registry = registry or Registry.for_gateset(template)
    gs = template.copy()
    eye = np.eye(DIM)
    for owner in registry.owners:
        ch = eye + x[registry.slice(owner)].reshape(DIM, DIM)
        if owner in SPAM_LABELS:
            gs.spam_noise[owner] = ch
        else:
            gs.noise[owner] = ch
    return gs


@dataclass(frozen=True)
class LinearizedSequence:
    m_bar: float
    a_row: np.ndarray
    sequence: tuple[str, ...]
    projection: str | None = None


def linearize(
    gs_mean: NoisyGateSet,
    seq: Sequence[str],
    effect: str | None = None,
    registry: Registry | None = None,
) -> LinearizedSequence:
    registry = registry or Registry.for_gateset(gs_mean)
    seq = tuple(seq)
    gs_mean.check_sequence(seq)
    n = len(seq)

    # right[p] = state after p noisy gates; gated[p] = G_{p+1} right[p]
    right = np.empty((n + 1, DIM))
    gated = np.empty((n, DIM))
    right[0] = gs_mean.spam_noise["rho"] @ gs_mean.rho0
    for p, g in enumerate(seq):
        gated[p] = gs_mean.ideal[g] @ right[p]
        right[p + 1] = gs_mean.noise[g] @ gated[p]

    e_native = gs_mean.effect(effect)
    left = e_native @ gs_mean.spam_noise["E"]
    m_bar = float(left @ right[n])
    if not np.isfinite(m_bar):
        raise FloatingPointError("non-finite predicted outcome; prior means are pathological")

    a = np.zeros(registry.length)
    a[registry.slice("E")] += np.outer(e_native, right[n]).ravel()
    for p in range(n - 1, -1, -1):
        g = seq[p]
        a[registry.slice(g)] += np.outer(left, gated[p]).ravel()
        left = left @ gs_mean.noise[g] @ gs_mean.ideal[g]
    a[registry.slice("rho")] += np.outer(left, gs_mean.rho0).ravel()
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite sensitivity row")
    return LinearizedSequence(m_bar, a, seq, effect)


def linear_prediction(lin: LinearizedSequence, x: np.ndarray, x_lin: np.ndarray) -> np.ndarray:
    """``m_bar + a . (x - x_lin)``; ``x`` may be a stack of residual vectors."""
    return lin.m_bar + (np.asarray(x) - x_lin) @ lin.a_row


def batch_outcomes(
    template: NoisyGateSet,
    xs: np.ndarray,
    seq: Sequence[str],
    effect: str | None = None,
    registry: Registry | None = None,
) -> np.ndarray:
    """Exact (unclamped) outcomes of one sequence for a stack of residual vectors."""
    registry = registry or Registry.for_gateset(template)
    xs = np.atleast_2d(xs)
    s = xs.shape[0]
    eye = np.eye(DIM)
    chans = {o: eye + xs[:, registry.slice(o)].reshape(s, DIM, DIM) for o in registry.owners}
    v = np.einsum("sij,j->si", chans["rho"], template.rho0)
    for g in seq:
        v = np.einsum("sij,sj->si", chans[g], v @ template.ideal[g].T)
    e = np.einsum("i,sij->sj", template.effect(effect), chans["E"])
    return np.einsum("si,si->s", e, v)
