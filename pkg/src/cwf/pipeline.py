"""
End-to-end covariance Wiener filtering of an image stack:
whitening (colored noise), basis transform, mean and covariance estimation,
and per-image Wiener deconvolution.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .covariance import EstimatorConfig, GroupStatistics, estimate_covariance
from .ctf import eval_ctf
from .denoise import build_wiener_filters, denoise_cwf
from .fb import FbCoeffs, build_basis, forward, inverse, noise_covariance_blocks, radial_operator_blocks
from .imaging import DimensionError, DomainError, ImageStack
from .noise import NoiseModel, estimate_psd_corners, estimate_sigma2_white, whiten_stack

logger = logging.getLogger(__name__)


def ctf_blocks_for(basis, ctf_params):
    """Per-group list of per-block CTF matrices."""
    radii = basis.profile_radii
    return [radial_operator_blocks(basis, eval_ctf(p, radii)) for p in ctf_params]


def whitening_blocks_for(basis, noise_model):
    """``(W, W^-1)`` block lists of a colored noise model."""
    wp = noise_model.whitening_radial
    W = radial_operator_blocks(basis, wp)
    return W, [np.linalg.inv(b) for b in W]


def estimate_noise(stack, particle_radius, kind="white", **psd_options):
    """
    Noise model estimated from the corners of the stack.

    :param kind: ``"white"`` or ``"colored"``.
    :param psd_options: Passed to :func:`estimate_psd_corners` (colored only).
    """
    if kind == "white":
        return NoiseModel.white(estimate_sigma2_white(stack, particle_radius))
    if kind != "colored":
        raise DomainError(f"unknown noise kind {kind!r}")
    return NoiseModel.colored(estimate_psd_corners(stack, particle_radius, **psd_options))


@dataclass
class CwfResult:
    denoised: ImageStack
    coeffs: FbCoeffs
    covariance: object
    mean: object
    mean_image: np.ndarray
    noise: NoiseModel
    timings: dict = field(default_factory=dict)

    @property
    def diagnostics(self):
        return [d.as_dict() for d in self.covariance.diagnostics]


def run_cwf(
    stack,
    ctf_params,
    noise=None,
    basis=None,
    config=None,
    c=0.5,
    particle_radius=None,
    exact_noise_blocks=True,
    batch=2000,
):
    """
    Covariance Wiener filtering of a stack.

    :param stack: :class:`ImageStack` with defocus group ids.
    :param ctf_params: Per-group :class:`CtfParams`.
    :param noise: :class:`NoiseModel`; estimated from corners (white) if None.
    :param basis: :class:`FbBasis`; built with band limit ``c`` if None.
    :param config: :class:`EstimatorConfig`.
    :param particle_radius: Radius of the signal disk used for noise estimation
        (default ``0.4 L``).
    :param exact_noise_blocks: Model the coefficient noise covariance exactly
        instead of as the identity.
    :return: :class:`CwfResult`.
    """
    config = config or EstimatorConfig()
    timings = {}
    t = time.perf_counter()
    if basis is None:
        basis = build_basis(stack.L, c)
    elif basis.L != stack.L:
        raise DimensionError(f"basis side {basis.L} does not match stack side {stack.L}")
    if noise is None:
        noise = estimate_noise(stack, particle_radius or 0.4 * stack.L)
    data = stack
    W = Winv = None
    if noise.kind == "colored":
        data = whiten_stack(stack, noise.whitening_radial)
        W, Winv = whitening_blocks_for(basis, noise)
    timings["setup"] = time.perf_counter() - t

    t = time.perf_counter()
    coeffs = FbCoeffs.concatenate(
        forward(basis, data.data[s : s + batch]) for s in range(0, stack.n, batch)
    )
    timings["fb_transform"] = time.perf_counter() - t

    t = time.perf_counter()
    ctf_blocks = ctf_blocks_for(basis, ctf_params)
    nblocks = noise_covariance_blocks(basis) if exact_noise_blocks else None
    stats = GroupStatistics.from_coeffs(coeffs, stack.group_id, len(ctf_params))
    cov, mean = estimate_covariance(stats, ctf_blocks, noise.sigma2, config, nblocks, unwhiten=Winv)
    timings["covariance"] = time.perf_counter() - t

    t = time.perf_counter()
    filters = build_wiener_filters(cov, ctf_blocks, noise.sigma2, mean, whitening_blocks=W, noise_blocks=nblocks)
    den = denoise_cwf(coeffs, stack.group_id, filters)
    images = np.concatenate([inverse(basis, den[s : s + batch]) for s in range(0, den.n, batch)])
    mean_image = inverse(basis, FbCoeffs([m[None] for m in mean.blocks]))[0]
    timings["wiener"] = time.perf_counter() - t
    logger.info("CWF timings: %s", ", ".join(f"{k} {v:.2f} s" for k, v in timings.items()))
    return CwfResult(stack.with_data(images), den, cov, mean, mean_image, noise, timings)
