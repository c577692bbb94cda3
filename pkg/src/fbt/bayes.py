"""Gaussian state over the residual vector and scalar conjugate updates."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.linalg import blas

from .gateset import NoisyGateSet
from .linearize import LinearizedSequence, Registry, batch_outcomes, gateset_from_residual, linear_prediction
from .postproc import cptp_project_batch

log = logging.getLogger(__name__)

SCHEMA_CHECKPOINT = "fbt.checkpoint/v1"
PSD_FLOOR = -1e-10


class CovarianceError(ArithmeticError):
    pass


@dataclass
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray
    registry: Registry
    update_count: int = 0
    approx_error_active: bool = True
    provenance: str = "unspecified"

    def copy(self) -> "GaussianState":
        return replace(self, mean=self.mean.copy(), cov=self.cov.copy())

    def block_mean(self, owner: str) -> np.ndarray:
        return self.mean[self.registry.slice(owner)]

    def block_cov(self, owner: str) -> np.ndarray:
        sl = self.registry.slice(owner)
        return self.cov[sl, sl]

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def shot_noise_variance(m_pred: float, shots: int) -> float:
    """Binomial variance at the predicted mean, floored at ``1/(4 shots^2)``."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    m = min(max(float(m_pred), 0.0), 1.0)
    return max(m * (1.0 - m) / shots, 1.0 / (4.0 * shots * shots))


def update(
    state: GaussianState,
    lin: LinearizedSequence,
    observed: float,
    var: float,
    x_lin: np.ndarray | None = None,
    check: bool = False,
) -> GaussianState:
    """Condition ``state`` on one scalar observation (in place; the state is returned).

    The linear model is ``m = m_bar + a . (x - x_lin)`` with noise variance
    ``var``; ``x_lin`` defaults to the current mean.
    """
    if not var > 0:
        raise CovarianceError(f"observation variance must be positive, got {var}")
    a = lin.a_row
    if x_lin is None:
        pred = lin.m_bar
    else:
        pred = float(linear_prediction(lin, state.mean, x_lin))
    g = state.cov @ a
    s = float(a @ g) + var
    if not np.isfinite(s) or s <= 0:
        raise CovarianceError(f"innovation variance {s} is not positive")
    if check:
        before = float(a @ g)
    state.mean += g * ((observed - pred) / s)
    _rank1_downdate(state.cov, g, 1.0 / s)
    state.update_count += 1
    if check:
        after = float(a @ state.cov @ a)
        if after > before + 1e-12 * max(1.0, abs(before)):
            raise CovarianceError("variance along the measured direction increased")
    return state


def _rank1_downdate(cov: np.ndarray, g: np.ndarray, alpha: float) -> None:
    """``cov -= alpha g g^T`` in place (BLAS ger on the Fortran view of a C-ordered matrix)."""
    if cov.flags.c_contiguous and cov.dtype == np.float64:
        out = blas.dger(-alpha, g, g, a=cov.T, overwrite_a=1)
        if np.shares_memory(out, cov):
            return
    cov -= alpha * np.outer(g, g)


def symmetrize(cov: np.ndarray) -> np.ndarray:
    cov += cov.T
    cov *= 0.5
    return cov


def floor_covariance(cov: np.ndarray, floor: float = PSD_FLOOR) -> np.ndarray:
    """Symmetrize and clip eigenvalues below ``floor``; raises if that does not produce a PSD matrix."""
    symmetrize(cov)
    active = np.flatnonzero(np.diag(cov) != 0.0)
    if active.size == 0:
        return cov
    sub = cov[np.ix_(active, active)]
    w, v = np.linalg.eigh(sub)
    if w.min() < floor:
        w = np.clip(w, 0.0, None)
        sub = (v * w) @ v.T
        cov[np.ix_(active, active)] = 0.5 * (sub + sub.T)
        w2 = np.linalg.eigvalsh(cov[np.ix_(active, active)])
        if w2.min() < floor:
            raise CovarianceError(f"covariance not PSD after flooring (min eigenvalue {w2.min():.3e})")
    return cov


def sample_residuals(state: GaussianState, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from N(mean, cov); directions with zero variance stay at the mean."""
    active = np.flatnonzero(np.diag(state.cov) > 0)
    out = np.repeat(state.mean[None], n, axis=0)
    if active.size == 0:
        return out
    sub = state.cov[np.ix_(active, active)]
    try:
        factor = np.linalg.cholesky(sub + 1e-14 * np.eye(active.size))
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(sub)
        factor = v * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((n, active.size))
    out[:, active] += z @ factor.T
    return out


def project_residuals(xs: np.ndarray, registry: Registry, owners: Sequence[str] | None = None) -> np.ndarray:
    """CPTP-project every channel block of a stack of residual vectors."""
    xs = np.array(xs, dtype=float)
    n = xs.shape[0]
    eye = np.eye(16)
    for owner in owners if owners is not None else registry.owners:
        sl = registry.slice(owner)
        chans = eye + xs[:, sl].reshape(n, 16, 16)
        proj, _ = cptp_project_batch(chans)
        xs[:, sl] = (proj - eye).reshape(n, -1)
    return xs


def approximation_error_variance(
    state: GaussianState,
    template: NoisyGateSet,
    seq: Sequence[str],
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
    effect: str | None = None,
    samples: np.ndarray | None = None,
    lin: LinearizedSequence | None = None,
    x_lin: np.ndarray | None = None,
) -> float:
    """Monte-Carlo variance of (exact outcome - linear prediction) over physical posterior draws.

    ``samples`` may carry pre-drawn, already projected residual vectors.
    """
    if samples is None:
        if n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if not np.any(np.diag(state.cov) > 0):
            return 0.0
        rng = rng or np.random.default_rng()
        owners = [o for o in state.registry.owners if np.any(np.diag(state.block_cov(o)) > 0)]
        samples = project_residuals(sample_residuals(state, n_samples, rng), state.registry, owners)
    if x_lin is None:
        x_lin = state.mean
    if lin is None:
        from .linearize import linearize

        lin = linearize(gateset_from_residual(template, x_lin, state.registry), seq, effect, state.registry)
    exact = batch_outcomes(template, samples, seq, effect, state.registry)
    linear = linear_prediction(lin, samples, x_lin)
    diff = exact - linear
    if not np.all(np.isfinite(diff)):
        raise FloatingPointError("non-finite outcome while sampling the approximation error")
    return float(np.var(diff, ddof=1))


@dataclass
class ApproxErrorMonitor:
    """Turns approximation-error sampling off once it is negligible against shot noise."""

    ratio: float = 0.01
    window: int = 20
    streak: int = 0
    active: bool = True

    def observe(self, var_approx: float, var_shot: float) -> bool:
        if not self.active:
            return False
        if var_approx < self.ratio * var_shot:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.window:
            self.active = False
            log.info("approximation error dropped after %d small updates", self.streak)
        return self.active

    def reactivate(self) -> None:
        self.active = True
        self.streak = 0


def maybe_drop_approximation_error(monitor: ApproxErrorMonitor, var_approx: float, var_shot: float) -> bool:
    """Feed one update's variances to the monitor; returns whether sampling stays active."""
    return monitor.observe(var_approx, var_shot)


# --- checkpoints ----------------------------------------------------------------------------


def state_to_arrays(state: GaussianState) -> dict:
    return {
        "mean": state.mean,
        "cov": state.cov,
        "meta": np.array(
            json.dumps(
                {
                    "schema": SCHEMA_CHECKPOINT,
                    "registry": list(state.registry.owners),
                    "update_count": state.update_count,
                    "approx_error_active": state.approx_error_active,
                    "provenance": state.provenance,
                }
            )
        ),
    }


def state_from_arrays(arrs) -> GaussianState:
    meta = json.loads(str(arrs["meta"]))
    if meta.get("schema") != SCHEMA_CHECKPOINT:
        raise ValueError(f"unsupported checkpoint schema {meta.get('schema')!r}")
    return GaussianState(
        mean=np.array(arrs["mean"], dtype=float),
        cov=np.array(arrs["cov"], dtype=float),
        registry=Registry(tuple(meta["registry"])),
        update_count=int(meta["update_count"]),
        approx_error_active=bool(meta["approx_error_active"]),
        provenance=meta["provenance"],
    )


def state_to_json(state: GaussianState) -> dict:
    """Text form; python float repr keeps 17 significant digits, so it round-trips exactly."""
    meta = json.loads(str(state_to_arrays(state)["meta"]))
    meta["mean"] = state.mean.tolist()
    meta["cov"] = state.cov.tolist()
    return meta


def state_from_json(doc: dict) -> GaussianState:
    arrs = {"mean": doc["mean"], "cov": doc["cov"], "meta": json.dumps({k: v for k, v in doc.items() if k not in ("mean", "cov")})}
    return state_from_arrays(arrs)


def save_state(state: GaussianState, path) -> None:
    path = str(path)
    if path.endswith(".json"):
        with open(path, "w") as fh:
            json.dump(state_to_json(state), fh)
    else:
        with open(path, "wb") as fh:
            np.savez(fh, **state_to_arrays(state))


def load_state(path) -> GaussianState:
    path = str(path)
    if path.endswith(".json"):
        with open(path) as fh:
            return state_from_json(json.load(fh))
    with np.load(path, allow_pickle=False) as arrs:
        return state_from_arrays(arrs)
