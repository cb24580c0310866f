"""Embedded ensembles: finite-width shared-weight ensembles and their infinite-width kernels."""

from .numerics import Cov2, NotPSDError, QuadratureError, QuadratureSpec, Seed, split_rng
from .specs import ArchSpec, LayerSpec, ModulationSpec, TrainConfig, gamma_value
from .net import EnsembleParams, forward, forward_batch, init_params, train
from .kernels import LayerKernels, assemble_ntk, gp_covariance_blocks, moments, run_recursion

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "Cov2", "EnsembleParams", "LayerKernels", "LayerSpec", "ModulationSpec",
    "NotPSDError", "QuadratureError", "QuadratureSpec", "Seed", "TrainConfig",
    "assemble_ntk", "forward", "forward_batch", "gamma_value", "gp_covariance_blocks",
    "init_params", "moments", "run_recursion", "split_rng", "train",
]
