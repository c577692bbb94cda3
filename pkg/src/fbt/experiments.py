"""End-to-end drivers: per-length sweeps and batch-wise drift tracking."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .bayes import GaussianState, sample_residuals
from .bootstrap import BootstrapConfig, bootstrap
from .estimator import Estimator, EstimatorConfig
from .gateset import DIM, NoisyGateSet
from .linearize import Registry, gateset_from_residual
from .postproc import (
    BranchCutError,
    GaugeTransform,
    decomposition_coefficients,
    entanglement_infidelity,
    error_generator,
    gauge_optimize,
    generator_frame,
    infidelity_report,
)
from .records import ObservationRecord
from .simulator import ExperimentPlan, NoiseInjection, simulate, simulate_batch

log = logging.getLogger(__name__)


def free_gates(gs: NoisyGateSet) -> list[str]:
    return [g for g in gs.labels if g not in gs.frozen]


def gauged_noise(gs: NoisyGateSet, x: np.ndarray, s: np.ndarray, registry: Registry, gate: str) -> np.ndarray:
    """Noise channel of ``gate`` for residual ``x`` after the similarity ``S``."""
    lam = np.eye(DIM) + x[..., registry.slice(gate)].reshape(x.shape[:-1] + (DIM, DIM))
    g = gs.ideal[gate]
    s_inv = np.linalg.inv(s)
    return s_inv @ lam @ g @ s @ np.linalg.inv(g)


def eps_ent_gradient(gs: NoisyGateSet, s: np.ndarray, gate: str) -> np.ndarray:
    """d eps_ent / d eps_gate (row-major) for the gauged channel; eps_ent is linear in the residual."""
    g = gs.ideal[gate]
    m = g @ s @ np.linalg.inv(g) @ np.linalg.inv(s)
    return -m.T.ravel() / DIM


def _generator_coefficients(chans: np.ndarray) -> np.ndarray:
    """Taxonomy coefficients of a stack of channels; rows that hit the branch cut come back NaN."""
    out = np.full((chans.shape[0], len(generator_frame().labels)), np.nan)
    for k, ch in enumerate(chans):
        try:
            out[k] = decomposition_coefficients(error_generator(ch))
        except BranchCutError:
            pass
    return out


# --- length sweep ---------------------------------------------------------------------------


@dataclass
class SweepConfig:
    boot: BootstrapConfig = field(default_factory=BootstrapConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    coefficients: tuple[str, ...] = ("H_IZ", "H_ZI", "H_ZZ")
    n_draws: int = 1000
    credibility: float = 0.997
    regauge_draws: bool = True
    min_records: int = 200
    w_g: float = 1.0
    w_s: float = 1e-3
    seed: int = 0


@dataclass
class LengthResult:
    length: int
    state: GaussianState
    gauge: GaugeTransform
    n_records: int
    coefficients: dict[str, dict[str, float]]  # gate -> label -> value
    intervals: dict[str, dict[str, tuple[float, float]]]
    sd: dict[str, dict[str, float]]
    eps_ent: dict[str, float]
    flagged: bool = False
    reason: str = ""


@dataclass
class LengthSweepResult:
    lengths: list[int]
    per_length: dict[int, LengthResult]

    def rows(self) -> list[dict]:
        out = []
        for L in self.lengths:
            r = self.per_length[L]
            for gate, table in r.coefficients.items():
                for lab, v in table.items():
                    lo, hi = r.intervals[gate][lab]
                    out.append(
                        {"gate": gate, "coefficient": lab, "L": L, "value": v, "ci_low": lo, "ci_high": hi, "flagged": r.flagged}
                    )
        return out

    def series(self, gate: str, label: str) -> np.ndarray:
        return np.array([self.per_length[L].coefficients[gate][label] for L in self.lengths])

    def to_csv(self, path) -> None:
        _write_csv(path, self.rows())

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"schema": "fbt.length_sweep/v1", "rows": self.rows()}, indent=1))


def _write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def estimate(gs: NoisyGateSet, records: Sequence[ObservationRecord], boot: BootstrapConfig, est_cfg: EstimatorConfig, seed: int) -> Estimator:
    est = Estimator(gs, bootstrap(boot, gs), est_cfg, seed=seed)
    est.process_many(records)
    return est


def summarize_posterior(
    gs: NoisyGateSet,
    state: GaussianState,
    labels: Sequence[str],
    n_draws: int,
    credibility: float,
    rng: np.random.Generator,
    regauge: bool = True,
    w_g: float = 1.0,
    w_s: float = 1e-3,
):
    """Gauge-fixed coefficients of the mean plus credible intervals from posterior draws.

    With ``regauge`` every draw gets its own gauge optimization, so the spread
    excludes gauge directions the data cannot see; otherwise the mean's gauge
    is applied to every draw.
    """
    reg = state.registry
    gates = free_gates(gs)
    frame = generator_frame()
    idx = [frame.labels.index(lab) for lab in labels]
    mean_gs = gateset_from_residual(gs, state.mean, reg)
    fit = gauge_optimize(mean_gs, gs, w_g, w_s)
    s = fit.transform.s
    coeffs, eps = {}, {}
    for g in gates:
        c = decomposition_coefficients(error_generator(fit.gateset.noise[g]))
        coeffs[g] = {lab: float(c[i]) for lab, i in zip(labels, idx)}
        eps[g] = entanglement_infidelity(fit.gateset.noise[g])
    draws = sample_residuals(state, n_draws, rng) if n_draws > 0 else np.empty((0, reg.length))
    samples = {g: np.empty((len(draws), len(idx))) for g in gates}
    for k, x in enumerate(draws):
        sk = gauge_optimize(gateset_from_residual(gs, x, reg), gs, w_g, w_s).transform.s if regauge else s
        for g in gates:
            samples[g][k] = _generator_coefficients(gauged_noise(gs, x, sk, reg, g)[None])[0, idx]
    tail = 100 * (1 - credibility) / 2
    intervals, sds = {}, {}
    for g in gates:
        smp = samples[g]
        ok = np.all(np.isfinite(smp), axis=1)
        if ok.sum() >= 2:
            lo, hi = np.percentile(smp[ok], [tail, 100 - tail], axis=0)
            sd = smp[ok].std(axis=0, ddof=1)
        else:
            lo = hi = np.full(len(idx), np.nan)
            sd = np.full(len(idx), np.nan)
        intervals[g] = {lab: (float(a), float(b)) for lab, a, b in zip(labels, lo, hi)}
        sds[g] = {lab: float(v) for lab, v in zip(labels, sd)}
    return fit, coeffs, intervals, sds, eps


def simulate_length_corpora(gs: NoisyGateSet, injection: NoiseInjection, plan: ExperimentPlan) -> dict[int, list[ObservationRecord]]:
    return {L: simulate(plan, injection, gs, length=L) for L in plan.lengths}


def run_length_sweep(
    gs: NoisyGateSet,
    data: Mapping[int, Sequence[ObservationRecord]] | Callable[[int], Sequence[ObservationRecord]],
    lengths: Sequence[int],
    config: SweepConfig | None = None,
) -> LengthSweepResult:
    """Independent estimation session per length; nothing is shared between lengths."""
    config = config or SweepConfig()
    per = {}
    for L in lengths:
        records = data(L) if callable(data) else data[L]
        seed = int(np.random.SeedSequence([config.seed, L]).generate_state(1)[0])
        est = estimate(gs, records, config.boot, config.estimator, seed)
        rng = np.random.default_rng([config.seed, L, 1])
        fit, coeffs, intervals, sds, eps = summarize_posterior(
            gs, est.state, config.coefficients, config.n_draws, config.credibility, rng, config.regauge_draws, config.w_g, config.w_s
        )
        flagged = len(records) < config.min_records
        per[L] = LengthResult(
            length=L,
            state=est.state,
            gauge=fit.transform,
            n_records=len(records),
            coefficients=coeffs,
            intervals=intervals,
            sd=sds,
            eps_ent=eps,
            flagged=flagged,
            reason=f"only {len(records)} records (< {config.min_records})" if flagged else "",
        )
        if flagged:
            log.warning("length %d: %s", L, per[L].reason)
    return LengthSweepResult(list(lengths), per)


# --- drift tracking -------------------------------------------------------------------------


@dataclass
class DriftConfig:
    boot: BootstrapConfig = field(default_factory=BootstrapConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    inflation: float = 0.0
    forgetting: float = 0.0
    process_noise: Mapping[str, float] | None = None
    top_k: int = 6
    w_g: float = 1.0
    w_s: float = 1e-3
    seed: int = 0
    checkpoint_dir: str | None = None


@dataclass
class BatchResult:
    batch: int
    lab_time: float
    n_records: int
    eps_ent: dict[str, float]
    eps_sd: dict[str, float]
    top: dict[str, list[tuple[str, float]]]
    coefficients: dict[str, dict[str, float]]
    checkpoint: str | None = None


@dataclass
class DriftTrackResult:
    batches: list[BatchResult]
    final_state: GaussianState | None = None

    def series(self, gate: str, label: str | None = None) -> np.ndarray:
        if label is None:
            return np.array([b.eps_ent[gate] for b in self.batches])
        return np.array([b.coefficients[gate][label] for b in self.batches])

    def stochastic_rate(self, gate: str) -> np.ndarray:
        """Sum of the S-coefficients per batch; unlike single labels it does not move under gauge rotations."""
        return np.array([sum(v for k, v in b.coefficients[gate].items() if k.startswith("S_")) for b in self.batches])

    def times(self) -> np.ndarray:
        return np.array([b.lab_time for b in self.batches])

    def rows(self) -> list[dict]:
        out = []
        for b in self.batches:
            for gate, items in b.top.items():
                for lab, contrib in items:
                    out.append(
                        {
                            "batch": b.batch,
                            "lab_time": b.lab_time,
                            "gate": gate,
                            "eps_ent": b.eps_ent[gate],
                            "eps_sd": b.eps_sd[gate],
                            "generator": lab,
                            "contribution": contrib,
                        }
                    )
        return out

    def to_csv(self, path) -> None:
        _write_csv(path, self.rows())

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"schema": "fbt.drift_track/v1", "rows": self.rows()}, indent=1))


def group_batches(records: Sequence[ObservationRecord]) -> list[list[ObservationRecord]]:
    """Split a record stream on batch id, keeping arrival order."""
    out: list[list[ObservationRecord]] = []
    current = object()
    for r in records:
        if r.batch_id != current:
            out.append([])
            current = r.batch_id
        out[-1].append(r)
    return out


def _check_order(batches: Sequence[Sequence[ObservationRecord]]) -> None:
    prev_id, prev_t = None, -np.inf
    for recs in batches:
        if not recs:
            raise ValueError("empty batch")
        bid = recs[0].batch_id
        t = float(np.mean([r.timestamp for r in recs]))
        if prev_id is not None and bid is not None and bid <= prev_id:
            raise ValueError(f"batch {bid} arrived after batch {prev_id}")
        if t < prev_t:
            raise ValueError(f"batch {bid} has mean lab time {t} before the previous batch ({prev_t})")
        prev_id, prev_t = bid, t


def batch_summary(gs: NoisyGateSet, state: GaussianState, top_k: int, w_g: float, w_s: float):
    """Gauge-optimized per-gate infidelity (with linear-propagation SD), top generators and coefficients."""
    reg = state.registry
    fit = gauge_optimize(gateset_from_residual(gs, state.mean, reg), gs, w_g, w_s)
    s = fit.transform.s
    eps, sd, top, coeffs = {}, {}, {}, {}
    frame = generator_frame()
    for g in free_gates(gs):
        ch = fit.gateset.noise[g]
        eps[g] = entanglement_infidelity(ch)
        grad = eps_ent_gradient(gs, s, g)
        sd[g] = float(np.sqrt(max(grad @ state.block_cov(g) @ grad, 0.0)))
        try:
            rep = infidelity_report(ch)
            top[g] = rep.top(top_k)
            c = decomposition_coefficients(error_generator(ch))
            coeffs[g] = {lab: float(v) for lab, v in zip(frame.labels, c)}
        except BranchCutError:
            top[g], coeffs[g] = [], {}
    return eps, sd, top, coeffs


def run_drift_tracking(
    gs: NoisyGateSet,
    batches: Sequence[Sequence[ObservationRecord]],
    config: DriftConfig | None = None,
) -> DriftTrackResult:
    """Filter batch by batch: each batch boots from the previous posterior (full warm boot)."""
    config = config or DriftConfig()
    _check_order(batches)
    out = []
    state = None
    for b, recs in enumerate(batches):
        if state is None:
            prior = bootstrap(config.boot, gs)
        else:
            prior = bootstrap(
                BootstrapConfig(
                    strategy="full_warm",
                    prior_estimate=state,
                    inflation=config.inflation,
                    forgetting=config.forgetting,
                    process_noise=config.process_noise,
                ),
                gs,
            )
        est = Estimator(gs, prior, config.estimator, seed=[config.seed, b])
        est.process_many(recs)
        state = est.state
        eps, sd, top, coeffs = batch_summary(gs, state, config.top_k, config.w_g, config.w_s)
        ckpt = None
        if config.checkpoint_dir:
            Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            ckpt = str(Path(config.checkpoint_dir) / f"batch_{b:04d}.npz")
            est.save(ckpt)
        bid = recs[0].batch_id if recs[0].batch_id is not None else b
        out.append(
            BatchResult(
                batch=bid,
                lab_time=float(np.mean([r.timestamp for r in recs])),
                n_records=len(recs),
                eps_ent=eps,
                eps_sd=sd,
                top=top,
                coefficients=coeffs,
                checkpoint=ckpt,
            )
        )
        log.info("batch %s: eps_ent %s", bid, {g: f"{v:.2e}" for g, v in eps.items()})
    return DriftTrackResult(out, state)


def simulate_drift_batches(gs: NoisyGateSet, injection: NoiseInjection, plan: ExperimentPlan) -> list[list[ObservationRecord]]:
    return [simulate_batch(plan, injection, gs, b) for b in range(plan.n_batches)]
