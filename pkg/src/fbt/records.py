"""Observation records and their line-delimited JSON stream format.

One record per line::

    {"sequence": ["x1", "cz"], "freq": 0.43, "shots": 100, "t": 12.5, "batch": 0}

Optional keys: ``effect`` (measurement effect name, native when absent) and
``group`` (records sharing a group id are linearized at one point).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator

SCHEMA_RECORDS = "fbt.records/v1"


@dataclass(frozen=True)
class ObservationRecord:
    sequence: tuple[str, ...]
    observed_frequency: float
    shots: int
    timestamp: float = 0.0
    batch_id: int | None = None
    effect: str | None = None
    group: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sequence", tuple(self.sequence))
        if not isinstance(self.shots, (int,)) or isinstance(self.shots, bool) or self.shots < 1:
            raise ValueError(f"shots must be a positive integer, got {self.shots!r}")
        f = float(self.observed_frequency)
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"freq must lie in [0, 1], got {f}")
        counts = f * self.shots
        if abs(counts - round(counts)) > 1e-9 * max(1, self.shots):
            raise ValueError(f"freq * shots = {counts} is not an integer count")
        object.__setattr__(self, "observed_frequency", f)

    @property
    def counts(self) -> int:
        return int(round(self.observed_frequency * self.shots))

    def to_dict(self) -> dict:
        d = {
            "sequence": list(self.sequence),
            "freq": self.observed_frequency,
            "shots": self.shots,
            "t": self.timestamp,
        }
        if self.batch_id is not None:
            d["batch"] = self.batch_id
        if self.effect is not None:
            d["effect"] = self.effect
        if self.group is not None:
            d["group"] = self.group
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationRecord":
        try:
            seq = d["sequence"]
            freq = d["freq"]
            shots = d["shots"]
        except KeyError as exc:
            raise ValueError(f"record missing field {exc.args[0]!r}") from None
        if not isinstance(seq, list) or not all(isinstance(g, str) for g in seq):
            raise ValueError("record field 'sequence' must be a list of gate labels")
        if isinstance(shots, float) and shots.is_integer():
            shots = int(shots)
        return cls(
            sequence=tuple(seq),
            observed_frequency=float(freq),
            shots=shots,
            timestamp=float(d.get("t", 0.0)),
            batch_id=d.get("batch"),
            effect=d.get("effect"),
            group=d.get("group"),
        )


def parse_lines(lines: Iterable[str]) -> Iterator[ObservationRecord]:
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {n}: invalid JSON ({exc.msg})") from None
        if "schema" in d and "sequence" not in d:
            if d["schema"] != SCHEMA_RECORDS:
                raise ValueError(f"line {n}: unsupported schema {d['schema']!r}")
            continue
        try:
            yield ObservationRecord.from_dict(d)
        except ValueError as exc:
            raise ValueError(f"line {n}: {exc}") from None


def write_records(records: Iterable[ObservationRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": SCHEMA_RECORDS}) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_records(path) -> list[ObservationRecord]:
    with open(path) as fh:
        return list(parse_lines(fh))
