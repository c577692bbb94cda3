"""Synthetic noisy two-qubit device with static, drifting and length-dependent errors."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .gateset import DIM, SPAM_LABELS, NoisyGateSet
from .parity import PARITY_PROJECTIONS, ProjectedRecord, ProjectionSpec
from .pauli import ptm_to_choi
from .postproc import generator_from_coefficients
from .records import ObservationRecord

log = logging.getLogger(__name__)

SCHEMA_SIM = "fbt.simulation/v1"
MICROWAVE_GATES = ("x1", "x2")
CPTP_TOL = 1e-10


@dataclass
class DriftTerm:
    """Time-dependent offset added to one generator coefficient of one gate."""

    gate: str
    label: str
    kind: str = "sinusoidal"  # linear | sinusoidal | random_walk
    amplitude: float = 0.0
    period: float = 1.0
    phase: float = 0.0
    slope: float = 0.0
    step: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "sinusoidal", "random_walk"):
            raise ValueError(f"unknown drift kind {self.kind!r}")

    def value(self, t: float) -> float:
        if self.kind == "linear":
            return self.slope * t
        if self.kind == "sinusoidal":
            return self.amplitude * np.sin(2 * np.pi * t / self.period + self.phase)
        n = int(np.floor(max(t, 0.0) / self.step))
        return float(_random_walk(self.seed, self.amplitude, n + 1)[n])


@lru_cache(maxsize=64)
def _walk_cache(seed: int, amplitude: float, n: int) -> np.ndarray:
    steps = np.random.default_rng(seed).standard_normal(n) * amplitude
    steps[0] = 0.0
    return np.cumsum(steps)


def _random_walk(seed: int, amplitude: float, n: int) -> np.ndarray:
    size = 1024
    while size < n:
        size *= 2
    return _walk_cache(seed, amplitude, size)


@dataclass
class LengthTerm:
    """Coefficient offset proportional to the microwave pulses already played in the sequence."""

    gate: str
    label: str
    slope: float
    saturation: float | None = None
    counted: tuple[str, ...] = MICROWAVE_GATES

    def value(self, n_pulses: int) -> float:
        if self.saturation is None:
            return self.slope * n_pulses
        return self.saturation * (1.0 - np.exp(-self.slope * n_pulses / self.saturation))


@dataclass
class NoiseInjection:
    """Injected noise as error-generator coefficients (labels like ``"H_IX"``, ``"S_ZI"``)."""

    static: dict[str, dict[str, float]] = field(default_factory=dict)
    drift: list[DriftTerm] = field(default_factory=list)
    length_dependent: list[LengthTerm] = field(default_factory=list)
    time_resolution: float = 1.0

    @property
    def is_static(self) -> bool:
        return not self.drift and not self.length_dependent

    def coefficients(self, gate: str, t: float = 0.0, n_pulses: int = 0) -> dict[str, float]:
        out = dict(self.static.get(gate, {}))
        tq = self.quantize(t)
        for d in self.drift:
            if d.gate == gate:
                out[d.label] = out.get(d.label, 0.0) + d.value(tq)
        for term in self.length_dependent:
            if term.gate == gate:
                out[term.label] = out.get(term.label, 0.0) + term.value(n_pulses)
        # stochastic rates are physical only when non-negative
        return {k: (max(v, 0.0) if k.startswith("S_") else v) for k, v in out.items()}

    def quantize(self, t: float) -> float:
        if self.time_resolution <= 0:
            return float(t)
        return float(np.round(t / self.time_resolution) * self.time_resolution)

    def channel(self, gate: str, t: float = 0.0, n_pulses: int = 0) -> np.ndarray:
        key = (gate, self.quantize(t) if self.drift else 0.0, n_pulses if self.length_dependent else 0)
        cache = self.__dict__.setdefault("_channels", {})
        out = cache.get(key)
        if out is None:
            out = noise_channel(tuple(sorted(self.coefficients(gate, key[1], key[2]).items())))
            if len(cache) > 200000:
                cache.clear()
            cache[key] = out
        return out

    def noisy_gateset(self, gs: NoisyGateSet, t: float = 0.0) -> NoisyGateSet:
        """Gate set with the channels at time ``t`` and zero pulse count."""
        out = gs.copy()
        for g in out.noise:
            out.noise[g] = self.channel(g, t)
        for s in SPAM_LABELS:
            out.spam_noise[s] = self.channel(s, t)
        return out

    def to_dict(self) -> dict:
        return {
            "static": self.static,
            "drift": [asdict(d) for d in self.drift],
            "length_dependent": [asdict(d) for d in self.length_dependent],
            "time_resolution": self.time_resolution,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NoiseInjection":
        return cls(
            static={g: dict(c) for g, c in d.get("static", {}).items()},
            drift=[DriftTerm(**x) for x in d.get("drift", [])],
            length_dependent=[
                LengthTerm(**{**x, "counted": tuple(x.get("counted", MICROWAVE_GATES))})
                for x in d.get("length_dependent", [])
            ],
            time_resolution=float(d.get("time_resolution", 1.0)),
        )


class CPTPViolation(ValueError):
    pass


@lru_cache(maxsize=65536)
def noise_channel(coeffs: tuple[tuple[str, float], ...]) -> np.ndarray:
    """``expm`` of the generator with the given coefficients, checked to be CPTP."""
    if not coeffs or all(v == 0.0 for _, v in coeffs):
        out = np.eye(DIM)
    else:
        out = scipy.linalg.expm(generator_from_coefficients(dict(coeffs)))
        w = np.linalg.eigvalsh(ptm_to_choi(out)).min()
        tp = np.abs(out[0] - np.eye(DIM)[0]).max()
        if w < -CPTP_TOL or tp > CPTP_TOL:
            raise CPTPViolation(f"injected channel {dict(coeffs)} is not CPTP (min Choi eig {w:.2e}, TP err {tp:.2e})")
    out.setflags(write=False)
    return out


@dataclass
class DurationModel:
    """Per-shot duration ``readout + gate_time * N`` in arbitrary units."""

    gate_time: float = 1.0
    readout: float = 10.0

    def shot_time(self, length: int) -> float:
        return self.readout + self.gate_time * length


@dataclass
class ExperimentPlan:
    kind: str = "generic"  # length_sweep | drift_tracking | generic
    lengths: tuple[int, ...] = (8, 16, 32, 64, 128)
    n_sequences: int = 5000
    shots: int = 100
    batch_size: int = 80
    n_batches: int = 500
    batch_window_seconds: float = 32.4
    rasterized: bool = True
    seed: int = 0
    labels: tuple[str, ...] | None = None
    durations: DurationModel = field(default_factory=DurationModel)

    def __post_init__(self):
        if self.kind not in ("length_sweep", "drift_tracking", "generic"):
            raise ValueError(f"unknown plan kind {self.kind!r}")
        self.lengths = tuple(int(x) for x in self.lengths)
        if self.shots < 1 or self.n_sequences < 1 or self.batch_size < 1:
            raise ValueError("shots, n_sequences and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lengths"] = list(self.lengths)
        d["labels"] = list(self.labels) if self.labels else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentPlan":
        kw = dict(d)
        if "durations" in kw and isinstance(kw["durations"], Mapping):
            kw["durations"] = DurationModel(**kw["durations"])
        if kw.get("labels") is not None:
            kw["labels"] = tuple(kw["labels"])
        if "lengths" in kw:
            kw["lengths"] = tuple(kw["lengths"])
        return cls(**kw)


def generate_random_sequences(labels: Sequence[str], length: int, count: int, seed) -> list[tuple[str, ...]]:
    labels = list(labels)
    if not labels:
        raise ValueError("label set is empty")
    if count < 1:
        raise ValueError("count must be >= 1")
    if length < 0:
        raise ValueError("length must be >= 0")
    idx = np.random.default_rng(seed).integers(0, len(labels), size=(count, length))
    return [tuple(labels[i] for i in row) for row in idx]


def rasterize(
    sequences: Sequence[Sequence[str]],
    shots: int,
    rasterized: bool = True,
    durations: DurationModel | None = None,
    window: float | None = None,
    start: float = 0.0,
) -> list[tuple[int, int, float]]:
    """Execution schedule ``(sequence_index, shot_index, lab_time)``.

    Rasterized order loops over every sequence once per shot.  With ``window``
    set, durations are rescaled so the whole schedule spans exactly that time.
    """
    durations = durations or DurationModel()
    per = np.array([durations.shot_time(len(s)) for s in sequences])
    if rasterized:
        order = [(i, k) for k in range(shots) for i in range(len(sequences))]
    else:
        order = [(i, k) for i in range(len(sequences)) for k in range(shots)]
    step = np.array([per[i] for i, _ in order])
    total = step.sum()
    scale = window / total if window is not None and total > 0 else 1.0
    begin = start + scale * (np.cumsum(step) - step)
    return [(i, k, float(t)) for (i, k), t in zip(order, begin)]


def _pulse_counts(seq: Sequence[str], counted: Sequence[str]) -> list[int]:
    out, n = [], 0
    for g in seq:
        out.append(n)
        if g in counted:
            n += 1
    return out


def sequence_probability(
    gs: NoisyGateSet,
    injection: NoiseInjection,
    seq: Sequence[str],
    times: np.ndarray,
    effect: str | None = None,
) -> np.ndarray:
    """Exact outcome of ``seq`` for each lab time in ``times`` (channels evaluated per gate)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if injection.drift:
        tq = np.round(times / injection.time_resolution) * injection.time_resolution if injection.time_resolution > 0 else times
    else:
        tq = np.zeros_like(times)
    uniq, inv = np.unique(tq, return_inverse=True)
    counted = tuple({g for term in injection.length_dependent for g in term.counted}) or MICROWAVE_GATES
    counts = _pulse_counts(seq, counted)
    stacks: dict = {}

    def noisy(g, n):
        key = (g, n)
        if key not in stacks:
            stacks[key] = np.stack([injection.channel(g, t, n) @ gs.ideal[g] for t in uniq])
        return stacks[key]

    rho = np.stack([injection.channel("rho", t) @ gs.rho0 for t in uniq])
    eff = np.stack([gs.effect(effect) @ injection.channel("E", t) for t in uniq])
    v = rho
    for g, n in zip(seq, counts):
        v = np.einsum("tij,tj->ti", noisy(g, n), v)
    probs = np.einsum("ti,ti->t", eff, v)
    return probs[inv]


def _shot_outcomes(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return rng.random(p.shape) < np.clip(p, 0.0, 1.0)


def simulate_sequences(
    gs: NoisyGateSet,
    injection: NoiseInjection,
    sequences: Sequence[Sequence[str]],
    shots: int,
    seed: int,
    batch_id: int | None = None,
    start: float = 0.0,
    window: float | None = None,
    rasterized: bool = True,
    durations: DurationModel | None = None,
    effect: str | None = None,
) -> list[ObservationRecord]:
    """One Bernoulli draw per scheduled shot, aggregated per sequence.

    Each sequence draws from its own stream ``(seed, batch, index)`` so the
    result does not depend on evaluation order.
    """
    for s in sequences:
        gs.check_sequence(s)
    schedule = rasterize(sequences, shots, rasterized, durations, window, start)
    times = np.empty((len(sequences), shots))
    for i, k, t in schedule:
        times[i, k] = t
    out = []
    for i, seq in enumerate(sequences):
        p = sequence_probability(gs, injection, seq, times[i], effect)
        rng = np.random.default_rng([seed, 0 if batch_id is None else batch_id + 1, i])
        hits = int(_shot_outcomes(p, rng).sum())
        out.append(
            ObservationRecord(
                tuple(seq),
                hits / shots,
                shots,
                timestamp=float(times[i].mean()),
                batch_id=batch_id,
                effect=effect,
            )
        )
    return out


def plan_sequences(plan: ExperimentPlan, gs: NoisyGateSet, length: int | None = None, batch: int | None = None):
    labels = plan.labels or tuple(gs.labels)
    if plan.kind == "drift_tracking":
        n = plan.batch_size
        per_len = [plan.lengths[k % len(plan.lengths)] for k in range(n)]
        rng_seed = [plan.seed, 1, batch or 0]
        rng = np.random.default_rng(rng_seed)
        idx = [rng.integers(0, len(labels), size=L) for L in per_len]
        return [tuple(labels[j] for j in row) for row in idx]
    if length is None:
        # generic plans split the sequence budget evenly over lengths
        seqs = []
        n_each = max(plan.n_sequences // len(plan.lengths), 1)
        for k, L in enumerate(plan.lengths):
            seqs += generate_random_sequences(labels, L, n_each, [plan.seed, 2, k])
        return seqs
    return generate_random_sequences(labels, length, plan.n_sequences, [plan.seed, 0, length])


def simulate(plan: ExperimentPlan, injection: NoiseInjection, gs: NoisyGateSet, length: int | None = None):
    """Records for a plan.

    * ``length_sweep``: one corpus at ``length`` (or every length, concatenated).
    * ``drift_tracking``: ``n_batches`` batches of ``batch_size`` sequences with
      lengths cycling through ``plan.lengths``; batch b starts at ``b * window``.
    * ``generic``: ``n_sequences`` split over ``plan.lengths``.
    """
    if plan.kind == "drift_tracking":
        out = []
        for b in range(plan.n_batches):
            out += simulate_batch(plan, injection, gs, b)
        return out
    if plan.kind == "length_sweep":
        lengths = [length] if length is not None else list(plan.lengths)
        out = []
        for L in lengths:
            seqs = plan_sequences(plan, gs, L)
            out += simulate_sequences(
                gs, injection, seqs, plan.shots, plan.seed, batch_id=L, rasterized=plan.rasterized, durations=plan.durations
            )
        return out
    seqs = plan_sequences(plan, gs)
    return simulate_sequences(gs, injection, seqs, plan.shots, plan.seed, rasterized=plan.rasterized, durations=plan.durations)


def simulate_batch(plan: ExperimentPlan, injection: NoiseInjection, gs: NoisyGateSet, batch: int):
    seqs = plan_sequences(plan, gs, batch=batch)
    return simulate_sequences(
        gs,
        injection,
        seqs,
        plan.shots,
        plan.seed,
        batch_id=batch,
        start=batch * plan.batch_window_seconds,
        window=plan.batch_window_seconds,
        rasterized=plan.rasterized,
        durations=plan.durations,
    )


def simulate_projected(
    gs: NoisyGateSet,
    injection: NoiseInjection,
    sequences: Sequence[Sequence[str]],
    shots: int,
    seed: int,
    projections: Sequence[ProjectionSpec] = PARITY_PROJECTIONS,
) -> list[ProjectedRecord]:
    """Each projection is an independent repetition: the main sequence plus its prefix, read natively."""
    per = {}
    for k, proj in enumerate(projections):
        runs = [tuple(s) + proj.prefix_sequence for s in sequences]
        per[proj.label] = simulate_sequences(gs, injection, runs, shots, seed, batch_id=k)
    out = []
    for i, s in enumerate(sequences):
        outcomes = {lab: (recs[i].observed_frequency, recs[i].shots) for lab, recs in per.items()}
        t = float(np.mean([recs[i].timestamp for recs in per.values()]))
        out.append(ProjectedRecord(tuple(s), outcomes, t, None))
    return out


def config_document(plan: ExperimentPlan, injection: NoiseInjection) -> dict:
    return {"schema": SCHEMA_SIM, "plan": plan.to_dict(), "injection": injection.to_dict()}


def load_config_document(doc: Mapping) -> tuple[ExperimentPlan, NoiseInjection]:
    if doc.get("schema") != SCHEMA_SIM:
        raise ValueError(f"unsupported simulation schema {doc.get('schema')!r}")
    return ExperimentPlan.from_dict(doc["plan"]), NoiseInjection.from_dict(doc.get("injection", {}))


def load_config_file(path) -> tuple[ExperimentPlan, NoiseInjection]:
    with open(path) as fh:
        return load_config_document(json.load(fh))
