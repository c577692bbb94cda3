"""Streaming Bayesian gate-set tomography for two-qubit gate sets."""

from .bayes import GaussianState, shot_noise_variance, update
from .bootstrap import BootstrapConfig, bootstrap
from .estimator import Estimator, EstimatorConfig
from .gateset import NoisyGateSet, exact_outcome, ideal_two_qubit_gateset
from .linearize import Registry, linearize
from .postproc import (
    cptp_project,
    decompose_generator,
    error_generator,
    gauge_optimize,
    infidelity_report,
)
from .records import ObservationRecord
from .simulator import ExperimentPlan, NoiseInjection, simulate

__all__ = [
    "BootstrapConfig",
    "Estimator",
    "EstimatorConfig",
    "ExperimentPlan",
    "GaussianState",
    "NoiseInjection",
    "NoisyGateSet",
    "ObservationRecord",
    "Registry",
    "bootstrap",
    "cptp_project",
    "decompose_generator",
    "error_generator",
    "exact_outcome",
    "gauge_optimize",
    "ideal_two_qubit_gateset",
    "infidelity_report",
    "linearize",
    "shot_noise_variance",
    "simulate",
    "update",
]
