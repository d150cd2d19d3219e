"""
Covariance Wiener filtering for cryo-EM images.

Estimates the CTF-corrected covariance of clean particle images from noisy,
CTF-affected observations in a steerable Fourier-Bessel basis and restores
every image with its Wiener filter. Baselines (phase flipping, traditional
Wiener filtering), noise whitening, an outlier classifier and a synthetic data
simulator are included.
"""

from .covariance import (
    BlockCovariance,
    EstimatorConfig,
    GroupStatistics,
    MeanEstimate,
    apply_L,
    assemble_rhs,
    cg_solve,
    detect_rank,
    estimate_covariance,
    estimate_mean,
    mp_edges,
    psd_project,
    shrink_eigenvalues,
)
from .ctf import CtfParams, DefocusGroup, ctf_as_2d, eval_ctf, make_groups, phase_flip_signs
from .denoise import (
    WienerFilterSet,
    build_wiener_filters,
    classify_outliers,
    denoise_cwf,
    denoise_phaseflip,
    denoise_twf,
    estimate_contrast,
)
from .fb import FbBasis, FbCoeffs, build_basis, forward, inverse, radial_operator_blocks
from .imaging import (
    DimensionError,
    DomainError,
    FrequencyGrid,
    ImageStack,
    Metrics,
    RadialProfile,
    UndefinedMetricError,
    mean_relative_mse,
    relative_mse,
    snr_of_stack,
)
from .noise import NoiseModel, build_whitening, estimate_psd_corners, estimate_sigma2_white, whiten_stack
from .pipeline import CwfResult, run_cwf
from .simulate import Phantom, SimulationSpec, corrupt, default_phantom, project_phantom, sample_orientations

__version__ = "0.1.0"

__all__ = [
    "BlockCovariance",
    "EstimatorConfig",
    "GroupStatistics",
    "MeanEstimate",
    "apply_L",
    "assemble_rhs",
    "cg_solve",
    "detect_rank",
    "estimate_covariance",
    "estimate_mean",
    "mp_edges",
    "psd_project",
    "shrink_eigenvalues",
    "CtfParams",
    "DefocusGroup",
    "ctf_as_2d",
    "eval_ctf",
    "make_groups",
    "phase_flip_signs",
    "WienerFilterSet",
    "build_wiener_filters",
    "classify_outliers",
    "denoise_cwf",
    "denoise_phaseflip",
    "denoise_twf",
    "estimate_contrast",
    "FbBasis",
    "FbCoeffs",
    "build_basis",
    "forward",
    "inverse",
    "radial_operator_blocks",
    "DimensionError",
    "DomainError",
    "FrequencyGrid",
    "ImageStack",
    "Metrics",
    "RadialProfile",
    "UndefinedMetricError",
    "mean_relative_mse",
    "relative_mse",
    "snr_of_stack",
    "NoiseModel",
    "build_whitening",
    "estimate_psd_corners",
    "estimate_sigma2_white",
    "whiten_stack",
    "CwfResult",
    "run_cwf",
    "Phantom",
    "SimulationSpec",
    "corrupt",
    "default_phantom",
    "project_phantom",
    "sample_orientations",
]
