"""Initial priors: blind cold, fidelity cold, partial warm and full warm boots."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .bayes import GaussianState, project_residuals
from .gateset import DIM, SPAM_LABELS, NoisyGateSet
from .linearize import BLOCK, Registry, residual_from_gateset
from .pauli import depolarizing_ptm

log = logging.getLogger(__name__)

STRATEGIES = ("blind_cold", "fidelity_cold", "partial_warm", "full_warm")

# fields each strategy needs / must not carry
_REQUIRED = {
    "blind_cold": (),
    "fidelity_cold": ("fidelity_stats",),
    "partial_warm": ("guessed_mean",),
    "full_warm": ("prior_estimate",),
}
_FORBIDDEN = {
    "blind_cold": ("fidelity_stats", "prior_estimate", "guessed_mean"),
    "fidelity_cold": ("prior_estimate", "guessed_mean"),
    "partial_warm": ("fidelity_stats", "prior_estimate"),
    "full_warm": ("fidelity_stats", "guessed_mean"),
}


class BootstrapWarning(UserWarning):
    pass


@dataclass
class BootstrapConfig:
    """Inputs for one boot strategy.

    ``depolarization``, ``guessed_cov_scale`` and ``fidelity_stats`` may be a
    scalar (applied to every free gate) or a mapping keyed by gate / SPAM label.
    ``guessed_mean`` is a residual vector or a NoisyGateSet.
    """

    strategy: str = "blind_cold"
    depolarization: float | Mapping[str, float] = 0.0
    guessed_mean: np.ndarray | NoisyGateSet | None = None
    guessed_cov_scale: float | Mapping[str, float] | np.ndarray = 1e-4
    fidelity_stats: Mapping[str, tuple[float, float]] | None = None
    prior_estimate: GaussianState | None = None
    n_samples: int = 1000
    seed: int = 0
    fix_trace_row: bool = True
    spam_cov_scale: float | None = None
    inflation: float = 0.0
    forgetting: float = 0.0
    process_noise: Mapping[str, float] | None = None
    reactivate_approx_error: bool = True
    moment_fix_iters: int = 4

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in _REQUIRED[self.strategy]:
            if getattr(self, name) is None:
                raise ValueError(f"{self.strategy} boot requires '{name}'")
        for name in _FORBIDDEN[self.strategy]:
            if getattr(self, name) is not None:
                raise ValueError(f"{self.strategy} boot does not take '{name}'")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")


def _per_owner(value, owner: str, default=0.0):
    if isinstance(value, Mapping):
        return value.get(owner, default)
    return value


def free_mask(registry: Registry, gs: NoisyGateSet, fix_trace_row: bool = True) -> np.ndarray:
    """Residual entries that carry prior uncertainty (not frozen, not the trace-preserving row)."""
    mask = np.ones(registry.length, dtype=bool)
    for owner in registry.owners:
        sl = registry.slice(owner)
        if owner in gs.frozen:
            mask[sl] = False
        elif fix_trace_row:
            mask[sl.start : sl.start + DIM] = False
    return mask


def _diag_cov(registry, gs, scale, spam_scale, fix_trace_row) -> np.ndarray:
    mask = free_mask(registry, gs, fix_trace_row)
    var = np.zeros(registry.length)
    for owner in registry.owners:
        sl = registry.slice(owner)
        s = spam_scale if (owner in SPAM_LABELS and spam_scale is not None) else _per_owner(scale, owner, 0.0)
        var[sl] = s
    var[~mask] = 0.0
    if np.any(var < 0):
        raise ValueError("covariance scales must be non-negative")
    return np.diag(var)


def blind_cold_boot(cfg: BootstrapConfig, gs: NoisyGateSet) -> GaussianState:
    """Depolarizing guess per gate with a diagonal covariance."""
    registry = Registry.for_gateset(gs)
    mean = np.zeros(registry.length)
    for owner in registry.owners:
        if owner in gs.frozen:
            continue
        p = float(_per_owner(cfg.depolarization, owner, 0.0))
        mean[registry.slice(owner)] = (depolarizing_ptm(p) - np.eye(DIM)).ravel()
    cov = _diag_cov(registry, gs, cfg.guessed_cov_scale, cfg.spam_cov_scale, cfg.fix_trace_row)
    return GaussianState(mean, cov, registry, provenance="blind_cold")


def depolarizing_for_fidelity(f: float) -> float:
    """Depolarizing strength whose entanglement fidelity ``Tr(Lambda)/d^2`` equals ``f``."""
    if not 0.0 < f <= 1.0:
        raise ValueError(f"fidelity must lie in (0, 1], got {f}")
    return DIM * (1.0 - f) / (DIM - 1)


def _moments(samples: np.ndarray, registry: Registry, owners) -> tuple[np.ndarray, np.ndarray]:
    """Per-block sample mean and covariance; cross-block terms are left at zero."""
    mean = samples.mean(axis=0)
    cov = np.zeros((registry.length, registry.length))
    for owner in owners:
        sl = registry.slice(owner)
        cov[sl, sl] = np.cov(samples[:, sl], rowvar=False)
    return mean, cov


def _fidelity_spread(samples: np.ndarray, registry: Registry, owner: str) -> float:
    eps = samples[:, registry.slice(owner)].reshape(-1, DIM, DIM)
    f = 1.0 + np.trace(eps, axis1=1, axis2=2) / DIM
    return float(np.std(f, ddof=1))


def _mean_fidelity(samples: np.ndarray, registry: Registry, owner: str) -> float:
    eps = samples[:, registry.slice(owner)].reshape(-1, DIM, DIM)
    return float(np.mean(1.0 + np.trace(eps, axis1=1, axis2=2) / DIM))


def fidelity_cold_boot(cfg: BootstrapConfig, gs: NoisyGateSet) -> GaussianState:
    """Depolarizing mean matched to the fidelity; covariance matched to its spread.

    A diagonal covariance ``sigma^2`` on the 15 free diagonal PTM entries gives
    ``Var(F_ent) = 15 sigma^2 / d^4`` to first order, so the seed scale is
    ``sigma^2 = 256 sigma_f^2 / 15``.  The scale is then corrected by the ratio
    of target to sampled fidelity spread after CPTP resampling, and the
    depolarizing seed is shifted until the projected draws hit the target mean.
    """
    registry = Registry.for_gateset(gs)
    stats = cfg.fidelity_stats
    owners = [o for o in registry.owners if o not in gs.frozen and o in stats]
    depol = {o: depolarizing_for_fidelity(stats[o][0]) for o in owners}
    scale = {o: DIM * DIM * stats[o][1] / (DIM - 1) for o in owners}
    base = BootstrapConfig(
        strategy="blind_cold",
        depolarization=depol,
        guessed_cov_scale=scale,
        spam_cov_scale=0.0,
        fix_trace_row=True,
    )
    prior = blind_cold_boot(base, gs)
    active = [o for o in owners if scale[o] > 0]
    if not active:
        prior.provenance = "fidelity_cold"
        return prior
    rng = np.random.default_rng(cfg.seed)
    for _ in range(max(cfg.moment_fix_iters, 1)):
        samples = _sample_projected(prior, cfg.n_samples, rng, active)
        ratios, shifts = {}, {}
        for o in active:
            got = _fidelity_spread(samples, registry, o)
            ratios[o] = np.sqrt(stats[o][1]) / got if got > 0 else 1.0
            shifts[o] = _mean_fidelity(samples, registry, o) - stats[o][0]
        if all(abs(r - 1.0) < 0.05 for r in ratios.values()) and all(
            abs(d) < 0.05 * max(1.0 - stats[o][0], 1e-12) for o, d in shifts.items()
        ):
            break
        for o in active:
            sl = registry.slice(o)
            prior.cov[sl, sl] *= ratios[o] ** 2
            # projection pulls draws inward; move the seed mean against the bias
            depol[o] = max(depol[o] + shifts[o] * DIM / (DIM - 1), 0.0)
            prior.mean[sl] = (depolarizing_ptm(depol[o]) - np.eye(DIM)).ravel()
    else:
        samples = _sample_projected(prior, cfg.n_samples, rng, active)
    mean, cov = _moments(samples, registry, active)
    state = GaussianState(prior.mean.copy(), prior.cov.copy(), registry, provenance="fidelity_cold")
    for o in active:
        sl = registry.slice(o)
        state.mean[sl] = mean[sl]
        state.cov[sl, sl] = cov[sl, sl]
    _check_rank(state, registry, active)
    return state


def _sample_projected(prior: GaussianState, n: int, rng, owners) -> np.ndarray:
    from .bayes import sample_residuals

    return project_residuals(sample_residuals(prior, n, rng), prior.registry, owners)


def _check_rank(state: GaussianState, registry: Registry, owners, jitter: float = 1e-12) -> None:
    """Add diagonal jitter on blocks whose covariance is rank deficient."""
    for o in owners:
        sl = registry.slice(o)
        blk = state.cov[sl, sl]
        idx = np.flatnonzero(np.diag(blk) > 0)
        # entries pinned by the trace-preserving row never vary; judge rank on the rest
        free = np.arange(DIM, BLOCK)
        tested = free if idx.size == 0 else idx
        sub = blk[np.ix_(tested, tested)]
        if idx.size == 0 or np.linalg.matrix_rank(sub, tol=1e-14 * max(1.0, np.abs(sub).max())) < tested.size:
            warnings.warn(
                f"sample covariance of block {o!r} is rank deficient; adding {jitter:g} diagonal jitter",
                BootstrapWarning,
                stacklevel=3,
            )
            blk[free, free] += jitter
            state.cov[sl, sl] = blk


def partial_warm_boot(cfg: BootstrapConfig, gs: NoisyGateSet) -> GaussianState:
    """Sample from the guessed Gaussian, CPTP-project each draw, refit mean and covariance."""
    registry = Registry.for_gateset(gs)
    guess = cfg.guessed_mean
    if isinstance(guess, NoisyGateSet):
        guess = residual_from_gateset(guess, registry)
    mean = np.array(guess, dtype=float)
    if mean.shape != (registry.length,):
        raise ValueError(f"guessed_mean must have length {registry.length}, got {mean.shape}")
    if isinstance(cfg.guessed_cov_scale, np.ndarray) and cfg.guessed_cov_scale.ndim == 2:
        cov = np.array(cfg.guessed_cov_scale, dtype=float)
        if cov.shape != (registry.length, registry.length):
            raise ValueError("guessed covariance has the wrong shape")
    else:
        cov = _diag_cov(registry, gs, cfg.guessed_cov_scale, cfg.spam_cov_scale, cfg.fix_trace_row)
    owners = [o for o in registry.owners if o not in gs.frozen]
    prior = GaussianState(mean, cov, registry)
    rng = np.random.default_rng(cfg.seed)
    samples = _sample_projected(prior, cfg.n_samples, rng, owners)
    new_mean, new_cov = _moments(samples, registry, owners)
    for o in gs.frozen:
        sl = registry.slice(o)
        new_mean[sl] = mean[sl]
    state = GaussianState(new_mean, new_cov, registry, provenance="partial_warm")
    _check_rank(state, registry, owners)
    return state


def full_warm_boot(cfg: BootstrapConfig, gs: NoisyGateSet) -> GaussianState:
    """Previous posterior as the new prior.

    ``forgetting`` scales the covariance by ``1 + forgetting`` (fading memory);
    ``inflation`` adds a constant variance on every free entry;
    ``process_noise`` adds variance along elementary error generators.
    """
    prev = cfg.prior_estimate
    registry = Registry.for_gateset(gs)
    if prev.registry != registry:
        raise ValueError(f"checkpoint registry {prev.registry.owners} does not match gate set {registry.owners}")
    state = prev.copy()
    state.update_count = 0
    state.provenance = "full_warm"
    if cfg.reactivate_approx_error:
        state.approx_error_active = True
    if cfg.forgetting > 0:
        state.cov *= 1.0 + cfg.forgetting
    if cfg.inflation > 0:
        idx = np.flatnonzero(free_mask(registry, gs, cfg.fix_trace_row))
        state.cov[idx, idx] += cfg.inflation
    if cfg.process_noise:
        add_generator_noise(state, gs, cfg.process_noise)
    return state


def generator_noise_cov(gs: NoisyGateSet, rates: Mapping[str, float], registry: Registry | None = None) -> np.ndarray:
    """Covariance of a random walk in error-generator space.

    ``rates`` maps a generator class ("H", "S", "C", "A") or a single label
    ("S_ZI") to a variance per step; every free gate receives
    ``sum_k q_k vec(E_k) vec(E_k)^T`` on its own block.
    """
    from .postproc import generator_frame

    registry = registry or Registry.for_gateset(gs)
    frame = generator_frame()
    q = np.array([rates.get(lab, rates.get(cls, 0.0)) for lab, cls in zip(frame.labels, frame.classes)], dtype=float)
    if np.any(q < 0):
        raise ValueError("process-noise rates must be non-negative")
    basis = np.array([e.ravel() for e in frame.elements])
    block = (basis.T * q) @ basis
    cov = np.zeros((registry.length, registry.length))
    for owner in registry.owners:
        if owner in SPAM_LABELS or owner in gs.frozen:
            continue
        sl = registry.slice(owner)
        cov[sl, sl] = block
    return cov


def add_generator_noise(state: GaussianState, gs: NoisyGateSet, rates: Mapping[str, float]) -> GaussianState:
    state.cov += generator_noise_cov(gs, rates, state.registry)
    return state


_DISPATCH = {
    "blind_cold": blind_cold_boot,
    "fidelity_cold": fidelity_cold_boot,
    "partial_warm": partial_warm_boot,
    "full_warm": full_warm_boot,
}


def bootstrap(cfg: BootstrapConfig, gs: NoisyGateSet) -> GaussianState:
    cfg.validate()
    state = _DISPATCH[cfg.strategy](cfg, gs)
    log.info("booted prior with %s (%d parameters)", cfg.strategy, state.mean.size)
    return state


def config_from_dict(doc: Mapping, prior_estimate: GaussianState | None = None) -> BootstrapConfig:
    """Build a config from a JSON-like payload; arrays arrive as nested lists."""
    known = set(BootstrapConfig.__dataclass_fields__)
    extra = set(doc) - known - {"checkpoint"}
    if extra:
        raise ValueError(f"unknown bootstrap fields: {sorted(extra)}")
    kw = dict(doc)
    kw.pop("checkpoint", None)
    if kw.get("guessed_mean") is not None:
        kw["guessed_mean"] = np.asarray(kw["guessed_mean"], dtype=float)
    if isinstance(kw.get("guessed_cov_scale"), list):
        kw["guessed_cov_scale"] = np.asarray(kw["guessed_cov_scale"], dtype=float)
    if kw.get("fidelity_stats") is not None:
        kw["fidelity_stats"] = {k: tuple(v) for k, v in kw["fidelity_stats"].items()}
    if prior_estimate is not None:
        kw["prior_estimate"] = prior_estimate
    cfg = BootstrapConfig(**kw)
    cfg.validate()
    return cfg
