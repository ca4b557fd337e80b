"""Simulated distributed learning with compressed local momentum."""

from .compress import CompressorSpec, sparsify, sparsify_count
from .estimator import CompressedMomentumSVM
from .sim import (
    DistConfig,
    DistNoise,
    DistState,
    NodeNonFiniteError,
    cm_step,
    dist_metrics,
    dist_system,
    run_distributed,
    run_distributed_mssa,
    server_average,
)
from .svm import DistProblem, SVMData, SVMProblem, estimate_dissimilarity, gen_svm_data, svm_loss_grad

__all__ = [
    "CompressedMomentumSVM",
    "CompressorSpec",
    "DistConfig",
    "DistNoise",
    "DistProblem",
    "DistState",
    "NodeNonFiniteError",
    "SVMData",
    "SVMProblem",
    "cm_step",
    "dist_metrics",
    "dist_system",
    "estimate_dissimilarity",
    "gen_svm_data",
    "run_distributed",
    "run_distributed_mssa",
    "server_average",
    "sparsify",
    "sparsify_count",
    "svm_loss_grad",
]
