"""Deconfounded warm-start Thompson sampling: offline deconfounding plus online linear bandits."""

from .deconfound import DdlEstimate, DdlOptions, Mask, build_mask, choose_kappa_theoretical, ddl_fit
from .harness import ExperimentConfig, run_replication, run_suite
from .policies import OFUL, LinearTS
from .synth import ArmParams, SemConfig, build_true_params, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "ArmParams", "DdlEstimate", "DdlOptions", "ExperimentConfig", "LinearTS", "Mask", "OFUL",
    "SemConfig", "build_mask", "build_true_params", "choose_kappa_theoretical", "ddl_fit",
    "generate_dataset", "run_replication", "run_suite",
]
