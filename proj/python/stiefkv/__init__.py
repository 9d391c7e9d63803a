"""Learned low-rank KV-cache projections (Python bindings)."""

from ._core import (
    Bases,
    Model,
    Surface,
    allocate,
    candidate_ranks,
    compression_ratio,
    default_config,
    eigen_value_basis,
    fingerprint,
    ksvd_basis,
    pareto_front,
    reconstruction_error_sq,
    run_cli,
    sensitivity_weights,
)

__all__ = [
    "Bases",
    "Model",
    "Surface",
    "allocate",
    "candidate_ranks",
    "compression_ratio",
    "default_config",
    "eigen_value_basis",
    "fingerprint",
    "ksvd_basis",
    "pareto_front",
    "reconstruction_error_sq",
    "run_cli",
    "sensitivity_weights",
]
