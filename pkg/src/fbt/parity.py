"""Parity-native readout: effects, projection sequences and dataset unpacking.

The native measurement reports odd parity (antiparallel spins).  Even parity
is reached by a projection sequence that flips qubit 2 before readout.

Four ways of feeding projected outcomes to the estimator:

A  one projection, its prefix treated as part of the measurement basis
B  one projection, its prefix appended to the main sequence (native effect)
C  every projection as a separate effect row, rows of one main sequence share
   a linearization point
D  every projection absorbed as in B, so M main sequences become N_E * M
   native records
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .pauli import pauli_basis, ptm_from_unitary
from .records import ObservationRecord


def pauli_expectations(rho: np.ndarray) -> np.ndarray:
    """Unnormalized Pauli expectation vector ``Tr(P rho)``."""
    b = pauli_basis(2).unnormalized()
    return np.einsum("kij,ji->k", b, rho).real


def _ket(bits: str) -> np.ndarray:
    psi = np.zeros(4, dtype=complex)
    psi[int(bits, 2)] = 1.0
    return np.outer(psi, psi.conj())


# '0' = spin down, '1' = spin up; qubit 1 is the left bit
UP_DOWN, DOWN_UP, UP_UP, DOWN_DOWN = "10", "01", "11", "00"


def make_parity_effects() -> tuple[np.ndarray, np.ndarray]:
    """Odd and even parity effects in the normalized Pauli basis.

    ``1/2 (<<ud| + <<du|)`` on Pauli expectation vectors is exactly the odd
    projector written in the ``P/sqrt(d)`` basis, so pairing with a
    vectorized density matrix gives the odd-parity probability.
    """
    odd = 0.5 * (pauli_expectations(_ket(UP_DOWN)) + pauli_expectations(_ket(DOWN_UP)))
    even = 0.5 * (pauli_expectations(_ket(UP_UP)) + pauli_expectations(_ket(DOWN_DOWN)))
    return odd, even


def identity_effect() -> np.ndarray:
    return pauli_expectations(np.eye(4)) / 2.0


def x2_pi_ptm() -> np.ndarray:
    from .gateset import rx

    return ptm_from_unitary(np.kron(np.eye(2), rx(np.pi / 2)))


@dataclass(frozen=True)
class ProjectionSpec:
    label: str
    prefix_sequence: tuple[str, ...] = ()
    effect: str | None = None  # effect name when the prefix is read as a measurement basis

    def __post_init__(self):
        object.__setattr__(self, "prefix_sequence", tuple(self.prefix_sequence))


ODD = ProjectionSpec("odd", (), None)
EVEN = ProjectionSpec("even", ("x2", "x2"), "even")
PARITY_PROJECTIONS = (ODD, EVEN)


@dataclass
class ProjectedRecord:
    """One main sequence with outcomes per projection: label -> (freq, shots)."""

    sequence: tuple[str, ...]
    outcomes: dict[str, tuple[float, int]]
    timestamp: float = 0.0
    batch_id: int | None = None

    def to_dict(self) -> dict:
        return {
            "sequence": list(self.sequence),
            "outcomes": {k: {"freq": f, "shots": s} for k, (f, s) in self.outcomes.items()},
            "t": self.timestamp,
            "batch": self.batch_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProjectedRecord":
        return cls(
            sequence=tuple(d["sequence"]),
            outcomes={k: (float(v["freq"]), int(v["shots"])) for k, v in d["outcomes"].items()},
            timestamp=float(d.get("t", 0.0)),
            batch_id=d.get("batch"),
        )


def _get(rec: ProjectedRecord, label: str) -> tuple[float, int]:
    try:
        return rec.outcomes[label]
    except KeyError:
        raise ValueError(f"record is missing an outcome for projection {label!r}") from None


def unpack_to_native(
    records: Sequence[ProjectedRecord],
    projections: Sequence[ProjectionSpec] = PARITY_PROJECTIONS,
    mode: str = "D",
    keep: str | None = None,
) -> list[ObservationRecord]:
    """Turn projected outcomes into estimator records for mode A, B, C or D."""
    mode = mode.upper()
    by_label = {p.label: p for p in projections}
    if mode in ("A", "B"):
        proj = by_label[keep] if keep is not None else projections[0]
    out: list[ObservationRecord] = []
    for k, rec in enumerate(records):
        common = dict(timestamp=rec.timestamp, batch_id=rec.batch_id)
        if mode == "A":
            f, s = _get(rec, proj.label)
            out.append(ObservationRecord(rec.sequence, f, s, effect=proj.effect, **common))
        elif mode == "B":
            f, s = _get(rec, proj.label)
            out.append(ObservationRecord(rec.sequence + proj.prefix_sequence, f, s, **common))
        elif mode == "C":
            for p in projections:
                f, s = _get(rec, p.label)
                out.append(ObservationRecord(rec.sequence, f, s, effect=p.effect, group=k, **common))
        elif mode == "D":
            for p in projections:
                f, s = _get(rec, p.label)
                out.append(ObservationRecord(rec.sequence + p.prefix_sequence, f, s, **common))
        else:
            raise ValueError(f"mode must be one of A, B, C, D; got {mode!r}")
    return out
