"""Noisy two-qubit gate sets and exact sequence outcomes.

A noisy gate is the ideal gate followed by its noise channel,
``G~ = Lambda G``.  Preparation and measurement carry their own channels:
``rho~ = Lambda_rho rho`` and ``<<E~| = <<E| Lambda_E``.  Sequences are lists
of labels in execution order (the first label acts first).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .pauli import pauli_basis, pauli_matrix, ptm_from_unitary, vectorize

log = logging.getLogger(__name__)

SCHEMA_GATESET = "fbt.gateset/v1"
SPAM_LABELS = ("E", "rho")
DIM = 16

GateSequence = tuple  # tuple[str, ...]


def rx(theta: float) -> np.ndarray:
    return np.cos(theta / 2) * np.eye(2) - 1j * np.sin(theta / 2) * pauli_matrix("X")


def rz(theta: float) -> np.ndarray:
    return np.cos(theta / 2) * np.eye(2) - 1j * np.sin(theta / 2) * pauli_matrix("Z")


CZ_UNITARY = np.diag([1, 1, 1, -1]).astype(complex)


def dcz_unitary(local_phase: np.ndarray | None = None) -> np.ndarray:
    """CZ conjugated by pi rotations on both qubits, optionally followed by a local phase.

    ``(X (x) X) CZ (X (x) X) = diag(-1, 1, 1, 1)`` squares to the identity.
    ``local_phase`` is an optional diagonal 4x4 unitary applied afterwards to
    select a different CZ-equivalent convention.
    """
    xx = np.kron(pauli_matrix("X"), pauli_matrix("X"))
    u = xx @ CZ_UNITARY @ xx
    if local_phase is not None:
        u = np.asarray(local_phase, dtype=complex) @ u
    return u


def basis_state(bits: str) -> np.ndarray:
    """Density matrix of a computational state; ``'0'`` is spin down, ``'1'`` spin up."""
    idx = int(bits, 2)
    psi = np.zeros(2 ** len(bits), dtype=complex)
    psi[idx] = 1.0
    return np.outer(psi, psi.conj())


def _as_matrix(m, shape, what: str) -> np.ndarray:
    arr = np.array(m, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{what}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: non-finite entries")
    return arr


@dataclass
class NoisyGateSet:
    ideal: dict[str, np.ndarray]
    noise: dict[str, np.ndarray]
    spam_noise: dict[str, np.ndarray]
    rho0: np.ndarray
    effects: dict[str, np.ndarray]
    native_effect: str = "odd"
    frozen: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if set(self.ideal) != set(self.noise):
            raise ValueError("ideal and noise maps must share gate labels")
        if set(self.spam_noise) != set(SPAM_LABELS):
            raise ValueError(f"spam_noise needs keys {SPAM_LABELS}")
        if self.native_effect not in self.effects:
            raise ValueError(f"unknown native effect {self.native_effect!r}")
        if not np.isclose(self.rho0[0], 1.0 / np.sqrt(np.sqrt(self.rho0.shape[0]))):
            raise ValueError("rho0 must have unit trace")

    @property
    def labels(self) -> list[str]:
        return list(self.ideal)

    def noisy(self, label: str) -> np.ndarray:
        return self.noise[label] @ self.ideal[label]

    def effect(self, name: str | None = None) -> np.ndarray:
        return self.effects[name or self.native_effect]

    def copy(self) -> "NoisyGateSet":
        return replace(
            self,
            ideal={k: v.copy() for k, v in self.ideal.items()},
            noise={k: v.copy() for k, v in self.noise.items()},
            spam_noise={k: v.copy() for k, v in self.spam_noise.items()},
            rho0=self.rho0.copy(),
            effects={k: v.copy() for k, v in self.effects.items()},
        )

    def with_noise(self, noise: Mapping[str, np.ndarray], spam: Mapping[str, np.ndarray] | None = None):
        out = self.copy()
        for k, v in noise.items():
            if k not in out.noise:
                raise KeyError(f"unknown gate label {k!r}")
            out.noise[k] = np.array(v, dtype=float)
        if spam:
            for k, v in spam.items():
                out.spam_noise[k] = np.array(v, dtype=float)
        return out

    def check_sequence(self, seq: Iterable[str]) -> None:
        for g in seq:
            if g not in self.ideal:
                raise KeyError(f"unknown gate label {g!r}")


def parity_effects() -> tuple[np.ndarray, np.ndarray]:
    from .parity import make_parity_effects

    return make_parity_effects()


def ideal_two_qubit_gateset(cz_variant: str = "cz", dcz_local_phase=None, frozen=("z1", "z2")) -> NoisyGateSet:
    """Five-gate set {x1, x2, z1, z2, cz|dcz} with identity noise and |down,down> preparation."""
    i2 = np.eye(2)
    unitaries = {
        "x1": np.kron(rx(np.pi / 2), i2),
        "x2": np.kron(i2, rx(np.pi / 2)),
        "z1": np.kron(rz(np.pi / 2), i2),
        "z2": np.kron(i2, rz(np.pi / 2)),
    }
    if cz_variant == "cz":
        unitaries["cz"] = CZ_UNITARY
    elif cz_variant == "dcz":
        unitaries["dcz"] = dcz_unitary(dcz_local_phase)
    else:
        raise ValueError(f"cz_variant must be 'cz' or 'dcz', got {cz_variant!r}")
    ideal = {k: ptm_from_unitary(u) for k, u in unitaries.items()}
    odd, even = parity_effects()
    return NoisyGateSet(
        ideal=ideal,
        noise={k: np.eye(DIM) for k in ideal},
        spam_noise={k: np.eye(DIM) for k in SPAM_LABELS},
        rho0=vectorize(basis_state("00")),
        effects={"odd": odd, "even": even},
        native_effect="odd",
        frozen=frozenset(frozen or ()),
    )


def prepared_state(gs: NoisyGateSet) -> np.ndarray:
    return gs.spam_noise["rho"] @ gs.rho0


def measured_effect(gs: NoisyGateSet, effect: str | None = None) -> np.ndarray:
    return gs.effect(effect) @ gs.spam_noise["E"]


def outcome_probability(gs: NoisyGateSet, seq: Sequence[str], effect: str | None = None) -> float:
    """Unclamped ``<<E| Lambda_E prod(Lambda_i G_i) Lambda_rho |rho>>``."""
    gs.check_sequence(seq)
    v = prepared_state(gs)
    for g in seq:
        v = gs.noise[g] @ (gs.ideal[g] @ v)
    return float(measured_effect(gs, effect) @ v)


def exact_outcome(gs: NoisyGateSet, seq: Sequence[str], effect: str | None = None) -> float:
    p = outcome_probability(gs, seq, effect)
    if p < 0.0 or p > 1.0:
        log.debug("clamping outcome %.3e for sequence of length %d", p, len(seq))
        p = min(max(p, 0.0), 1.0)
    return p


# --- serialization -------------------------------------------------------------------------


def gateset_to_dict(gs: NoisyGateSet) -> dict:
    basis = pauli_basis(2)
    return {
        "schema": SCHEMA_GATESET,
        "convention": {
            "basis_order": list(basis.labels),
            "normalization": "P/sqrt(d)",
            "noise_placement": "noise_after_gate",
            "matrix_layout": "row-major",
        },
        "gates": {
            k: {"ideal": gs.ideal[k].tolist(), "noise": gs.noise[k].tolist()} for k in gs.ideal
        },
        "spam_noise": {k: gs.spam_noise[k].tolist() for k in SPAM_LABELS},
        "rho0": gs.rho0.tolist(),
        "effects": {k: v.tolist() for k, v in gs.effects.items()},
        "native_effect": gs.native_effect,
        "frozen": sorted(gs.frozen),
    }


def gateset_from_dict(doc: Mapping) -> NoisyGateSet:
    if doc.get("schema") != SCHEMA_GATESET:
        raise ValueError(f"schema: expected {SCHEMA_GATESET!r}, got {doc.get('schema')!r}")
    order = doc.get("convention", {}).get("basis_order")
    if order is not None and list(order) != list(pauli_basis(2).labels):
        raise ValueError("convention.basis_order does not match the package Pauli order")
    gates = doc["gates"]
    ideal, noise = {}, {}
    for k, g in gates.items():
        ideal[k] = _as_matrix(g["ideal"], (DIM, DIM), f"gates.{k}.ideal")
        noise[k] = _as_matrix(g.get("noise", np.eye(DIM)), (DIM, DIM), f"gates.{k}.noise")
    spam = {
        k: _as_matrix(doc.get("spam_noise", {}).get(k, np.eye(DIM)), (DIM, DIM), f"spam_noise.{k}")
        for k in SPAM_LABELS
    }
    effects = {k: _as_matrix(v, (DIM,), f"effects.{k}") for k, v in doc["effects"].items()}
    return NoisyGateSet(
        ideal=ideal,
        noise=noise,
        spam_noise=spam,
        rho0=_as_matrix(doc["rho0"], (DIM,), "rho0"),
        effects=effects,
        native_effect=doc.get("native_effect", "odd"),
        frozen=frozenset(doc.get("frozen", ())),
    )


def dump_gateset(gs: NoisyGateSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(gateset_to_dict(gs), fh)


def load_gateset(path) -> NoisyGateSet:
    with open(path) as fh:
        return gateset_from_dict(json.load(fh))
