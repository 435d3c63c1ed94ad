"""Deterministic desk-scale federated learning harness.

Synthetic non-IID data, FedAvg-family local training, Byzantine and backdoor
adversaries, robust server aggregation and the accuracy, robustness and
contribution metrics that go with them.
"""

from .core import ContractViolation, RngStream
from .engine import ExperimentConfig, run_experiment, run_leave_one_domain_out, simulate

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "ExperimentConfig",
    "RngStream",
    "__version__",
    "run_experiment",
    "run_leave_one_domain_out",
    "simulate",
]
