"""Multi-output Gaussian process regression via the linear model of
coregionalization, with an exact projected reformulation whose latent
processes decouple under a diagonally-projectable noise model."""

from .exceptions import IndefiniteNoiseError, NumericalDegeneracyError
from .inference import (
    Dataset,
    PredictionResult,
    decoupled_posterior,
    latent_train_posterior,
    likelihood_decomposition,
    naive_mll,
    naive_posterior,
    projected_mll,
    raw_mll,
)
from .kernels import Matern52Kernel, cross_kernel, kernel_matrix, matern52
from .metrics import MetricsRecord, h_corr, l1_metrics, pva
from .model import LmcModel, VARIANTS
from .noise import (
    MixingQR,
    NoiseParams,
    SymmetricBlocks,
    build_sigma,
    build_sigma_inverse,
    check_dpn,
    compute_t,
    decompose_symmetric,
    orthonormal_from_skew,
    project_noise,
)
from .synthdata import DataGenConfig, generate, physical_mixing
from .training import FitReport, TrainConfig, fit, init_from_svd, loss_gradient

__all__ = [
    "Dataset",
    "DataGenConfig",
    "FitReport",
    "IndefiniteNoiseError",
    "LmcModel",
    "Matern52Kernel",
    "MetricsRecord",
    "MixingQR",
    "NoiseParams",
    "NumericalDegeneracyError",
    "PredictionResult",
    "SymmetricBlocks",
    "TrainConfig",
    "VARIANTS",
    "build_sigma",
    "build_sigma_inverse",
    "check_dpn",
    "compute_t",
    "cross_kernel",
    "decompose_symmetric",
    "decoupled_posterior",
    "fit",
    "generate",
    "h_corr",
    "init_from_svd",
    "kernel_matrix",
    "l1_metrics",
    "latent_train_posterior",
    "likelihood_decomposition",
    "loss_gradient",
    "matern52",
    "naive_mll",
    "naive_posterior",
    "orthonormal_from_skew",
    "physical_mixing",
    "project_noise",
    "projected_mll",
    "pva",
    "raw_mll",
]

__version__ = "0.1.0"
