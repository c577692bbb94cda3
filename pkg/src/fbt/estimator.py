"""Streaming estimator: linearize, weigh, update, one record at a time."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .bayes import (
    ApproxErrorMonitor,
    GaussianState,
    approximation_error_variance,
    floor_covariance,
    project_residuals,
    sample_residuals,
    shot_noise_variance,
    state_from_arrays,
    state_to_arrays,
    symmetrize,
    update,
)
from .gateset import NoisyGateSet, gateset_from_dict, gateset_to_dict
from .linearize import gateset_from_residual, linearize
from .records import ObservationRecord

log = logging.getLogger(__name__)


@dataclass
class EstimatorConfig:
    relinearize_every: int = 50
    approx_error: bool = True
    approx_samples: int = 100
    approx_ratio: float = 0.01
    approx_window: int = 20
    floor_every: int = 500
    check_monotone: bool = False


@dataclass
class UpdateSummary:
    index: int
    timestamp: float
    length: int
    predicted: float
    observed: float
    var_shot: float
    var_approx: float
    batch_id: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class Estimator:
    """Owns a GaussianState and applies records in arrival order (single writer)."""

    def __init__(
        self,
        template: NoisyGateSet,
        state: GaussianState,
        config: EstimatorConfig | None = None,
        seed: int | None = 0,
    ):
        self.template = template
        self.state = state
        self.config = config or EstimatorConfig()
        self.rng = np.random.default_rng(seed)
        self.monitor = ApproxErrorMonitor(self.config.approx_ratio, self.config.approx_window)
        self.monitor.active = bool(self.config.approx_error and state.approx_error_active)
        self.history: list[UpdateSummary] = []
        self.x_lin: np.ndarray | None = None
        self.gs_lin: NoisyGateSet | None = None
        self.approx_samples: np.ndarray | None = None
        self.since_relin = 0
        self.since_floor = 0
        self._group = None

    # -- linearization point ----------------------------------------------------------------

    def relinearize(self) -> None:
        symmetrize(self.state.cov)
        if self.since_floor >= self.config.floor_every:
            floor_covariance(self.state.cov)
            self.since_floor = 0
        self.x_lin = self.state.mean.copy()
        self.gs_lin = gateset_from_residual(self.template, self.x_lin, self.state.registry)
        self.since_relin = 0
        self.approx_samples = None
        if self.monitor.active:
            self._draw_approx_samples()

    def _draw_approx_samples(self) -> None:
        reg = self.state.registry
        owners = [o for o in reg.owners if np.any(np.diag(self.state.block_cov(o)) > 0)]
        if not owners:
            self.approx_samples = None
            return
        draws = sample_residuals(self.state, self.config.approx_samples, self.rng)
        self.approx_samples = project_residuals(draws, reg, owners)

    def current_gateset(self) -> NoisyGateSet:
        return gateset_from_residual(self.template, self.state.mean, self.state.registry)

    # -- updates ----------------------------------------------------------------------------

    def process(self, rec: ObservationRecord) -> UpdateSummary:
        in_group = rec.group is not None and rec.group == self._group
        if self.x_lin is None or (self.since_relin >= self.config.relinearize_every and not in_group):
            self.relinearize()
        self._group = rec.group
        lin = linearize(self.gs_lin, rec.sequence, rec.effect, self.state.registry)
        predicted = float(lin.m_bar + (self.state.mean - self.x_lin) @ lin.a_row)
        var_shot = shot_noise_variance(lin.m_bar, rec.shots)
        var_approx = 0.0
        if self.monitor.active and self.approx_samples is not None:
            var_approx = approximation_error_variance(
                self.state,
                self.template,
                rec.sequence,
                effect=rec.effect,
                samples=self.approx_samples,
                lin=lin,
                x_lin=self.x_lin,
            )
            if not self.monitor.observe(var_approx, var_shot):
                self.state.approx_error_active = False
                self.approx_samples = None
        elif self.monitor.active:
            # nothing left to sample (all blocks frozen)
            self.monitor.observe(0.0, var_shot)
            self.state.approx_error_active = self.monitor.active
        update(
            self.state,
            lin,
            rec.observed_frequency,
            var_shot + var_approx,
            x_lin=self.x_lin,
            check=self.config.check_monotone,
        )
        self.since_relin += 1
        self.since_floor += 1
        summary = UpdateSummary(
            index=self.state.update_count,
            timestamp=rec.timestamp,
            length=len(rec.sequence),
            predicted=predicted,
            observed=rec.observed_frequency,
            var_shot=var_shot,
            var_approx=var_approx,
            batch_id=rec.batch_id,
        )
        self.history.append(summary)
        return summary

    def process_many(self, records: Iterable[ObservationRecord]) -> list[UpdateSummary]:
        return [self.process(r) for r in records]

    def reactivate_approx_error(self) -> None:
        self.monitor.reactivate()
        self.state.approx_error_active = True
        if self.x_lin is not None:
            self._draw_approx_samples()

    # -- checkpointing ----------------------------------------------------------------------

    def to_arrays(self) -> dict:
        arrs = state_to_arrays(self.state)
        runtime = {
            "config": asdict(self.config),
            "template": gateset_to_dict(self.template),
            "rng": self.rng.bit_generator.state,
            "monitor": asdict(self.monitor),
            "since_relin": self.since_relin,
            "since_floor": self.since_floor,
            "group": self._group,
            "history": [h.to_dict() for h in self.history],
            "has_lin": self.x_lin is not None,
            "has_samples": self.approx_samples is not None,
        }
        arrs["runtime"] = np.array(json.dumps(runtime))
        if self.x_lin is not None:
            arrs["x_lin"] = self.x_lin
        if self.approx_samples is not None:
            arrs["approx_samples"] = self.approx_samples
        return arrs

    @classmethod
    def from_arrays(cls, arrs) -> "Estimator":
        runtime = json.loads(str(arrs["runtime"]))
        state = state_from_arrays(arrs)
        est = cls(gateset_from_dict(runtime["template"]), state, EstimatorConfig(**runtime["config"]))
        est.rng.bit_generator.state = runtime["rng"]
        est.monitor = ApproxErrorMonitor(**runtime["monitor"])
        est.since_relin = runtime["since_relin"]
        est.since_floor = runtime["since_floor"]
        est._group = runtime["group"]
        est.history = [UpdateSummary(**h) for h in runtime["history"]]
        if runtime["has_lin"]:
            est.x_lin = np.array(arrs["x_lin"])
            est.gs_lin = gateset_from_residual(est.template, est.x_lin, state.registry)
        if runtime["has_samples"]:
            est.approx_samples = np.array(arrs["approx_samples"])
        return est

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.to_arrays())

    @classmethod
    def load(cls, path) -> "Estimator":
        with np.load(path, allow_pickle=False) as arrs:
            return cls.from_arrays({k: arrs[k] for k in arrs.files})

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **self.to_arrays())
        return buf.getvalue()
