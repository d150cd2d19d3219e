"""
Per-image restoration: covariance Wiener filtering in the Fourier-Bessel basis,
the phase-flipping and traditional Wiener filtering baselines, and a contrast
score for outlier rejection.

For defocus group ``g`` and angular block ``k`` the Wiener filter is

    H = Sigma E^H (E Sigma E^H + sigma^2 N)^-1,      Xhat = (I - H E) mu + H Y,

with ``E = A`` for white noise and ``E = W A`` for whitened data, ``N`` the
block covariance of unit white noise (identity for an orthonormal transform).
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .ctf import ctf_as_2d, phase_flip_signs
from .fb import FbCoeffs
from .imaging import (
    DimensionError,
    DomainError,
    FrequencyGrid,
    ImageStack,
    UndefinedMetricError,
    apply_fourier_multiplier,
    fft2,
    radial_mask,
)

logger = logging.getLogger(__name__)


class FilterConditioningError(ArithmeticError):
    """Raised when the inner matrix of a Wiener filter is not positive definite."""


@dataclass
class WienerFilterSet:
    """
    ``filters[g][k]`` is the ``p_k x p_k`` filter of group ``g``; ``offsets[g][k]``
    the constant term ``(I - H E) mu``.
    """

    filters: list
    offsets: list

    @property
    def n_groups(self):
        return len(self.filters)


def _solve_pd(K, rhs):
    """Solve ``K x = rhs`` for Hermitian positive definite ``K``."""
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), rhs)
    except np.linalg.LinAlgError:
        pass
    Kh = 0.5 * (K + K.conj().T)
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(Kh), rhs)
    except np.linalg.LinAlgError:
        ev = np.linalg.eigvalsh(Kh)
        raise FilterConditioningError(
            f"Wiener inner matrix not positive definite: eigenvalues in [{ev.min():.3g}, {ev.max():.3g}]"
        ) from None


def build_wiener_filters(cov, ctf_blocks, sigma2, mean, whitening_blocks=None, noise_blocks=None):
    """
    Precompute the Wiener filter of every (group, block).

    :param cov: :class:`BlockCovariance` (or list of blocks) of the clean images.
    :param ctf_blocks: Per group, per block CTF matrices.
    :param sigma2: Noise variance of the data (1 for whitened data).
    :param mean: :class:`MeanEstimate` (or list of blocks).
    :param whitening_blocks: Per block ``W`` when the data are whitened.
    :param noise_blocks: Per block covariance of unit white noise; identity if None.
    :return: :class:`WienerFilterSet`.
    """
    if sigma2 < 0:
        raise DomainError("sigma2 must be >= 0")
    sig_blocks = cov.blocks if hasattr(cov, "blocks") else cov
    mu_blocks = mean.blocks if hasattr(mean, "blocks") else mean
    filters, offsets = [], []
    for g, A_blocks in enumerate(ctf_blocks):
        if len(A_blocks) != len(sig_blocks):
            raise DimensionError(f"group {g}: {len(A_blocks)} CTF blocks for {len(sig_blocks)} covariance blocks")
        Hg, cg = [], []
        for k, (A, S) in enumerate(zip(A_blocks, sig_blocks)):
            p = S.shape[0]
            E = A if whitening_blocks is None else whitening_blocks[k] @ A
            N = np.eye(p) if noise_blocks is None else noise_blocks[k]
            K = E @ S @ E.conj().T + sigma2 * N
            # H = S E^H K^-1 = (K^-1 E S)^H for Hermitian K and S
            H = _solve_pd(K, E @ S).conj().T if p else np.zeros((0, 0))
            if not np.all(np.isfinite(H)):
                raise FilterConditioningError(f"non-finite Wiener filter for group {g}, block {k}")
            Hg.append(H)
            cg.append(mu_blocks[k] - H @ (E @ mu_blocks[k]))
        filters.append(Hg)
        offsets.append(cg)
    return WienerFilterSet(filters, offsets)


def denoise_cwf(coeffs, group_id, filters):
    """
    Apply per-group Wiener filters: ``Xhat = (I - H E) mu + H Y`` per image and block.

    :param coeffs: :class:`FbCoeffs` of the (whitened, if applicable) noisy images.
    :param group_id: Defocus group of every image.
    :return: :class:`FbCoeffs` of the restored images.
    """
    group_id = np.asarray(group_id, dtype=np.int64)
    if group_id.shape != (coeffs.n,):
        raise DimensionError(f"{group_id.size} group ids for {coeffs.n} images")
    if group_id.max() >= filters.n_groups:
        raise DomainError("group id without a filter")
    out = [np.empty_like(b) for b in coeffs.blocks]
    for g in np.unique(group_id):
        sel = group_id == g
        for k, b in enumerate(coeffs.blocks):
            H = filters.filters[g][k]
            out[k][sel] = b[sel] @ H.T + filters.offsets[g][k]
    out[0] = out[0].real.astype(np.complex128)
    return FbCoeffs(out)


def _group_params(groups):
    return [getattr(g, "params", g) for g in groups]


def _per_group_multiply(stack, groups, make_multiplier):
    params = _group_params(groups)
    gid = stack.group_id
    if gid.max() >= len(params):
        raise DomainError(f"group id {gid.max()} has no CTF parameters")
    out = np.empty_like(stack.data)
    for g in np.unique(gid):
        sel = np.flatnonzero(gid == g)
        out[sel] = apply_fourier_multiplier(stack.data[sel], make_multiplier(params[g], stack.L))
    return stack.with_data(out)


def estimate_radial_ssnr(stack, groups, noise_variance):
    """
    Radial spectral SNR of the clean images estimated from the data: the
    group-averaged power spectra ``c_g^2 P + sigma^2`` are pooled into a least
    squares estimate of ``P`` per radius.

    :return: ``(L, L)`` SSNR on the centered grid.
    """
    params = _group_params(groups)
    L = stack.L
    radii, inv = FrequencyGrid.create(L).unique_radii()
    counts = np.bincount(inv.ravel())
    num = np.zeros(radii.size)
    den = np.zeros(radii.size)
    for g in np.unique(stack.group_id):
        sel = stack.group_id == g
        power = np.mean(np.abs(fft2(stack.data[sel])) ** 2, axis=0)
        c2 = ctf_as_2d(params[g], L) ** 2
        d = sel.sum()
        num += d * np.bincount(inv.ravel(), weights=(c2 * (power - noise_variance)).ravel()) / counts
        den += d * np.bincount(inv.ravel(), weights=(c2 * c2).ravel()) / counts
    P = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.maximum(P / noise_variance, 0.0)[inv]


def denoise_twf(stack, groups, assumed_ssnr=1.0, noise_variance=None):
    """
    Traditional Wiener filter ``c / (c^2 + 1 / ssnr)``.

    :param stack: :class:`ImageStack` with group ids.
    :param groups: Per-group :class:`CtfParams` (or :class:`DefocusGroup`).
    :param assumed_ssnr: Constant spectral SNR (> 0), or ``"estimate"`` to use
        :func:`estimate_radial_ssnr` (needs ``noise_variance``).
    """
    if isinstance(assumed_ssnr, str):
        if assumed_ssnr != "estimate" or noise_variance is None:
            raise DomainError("SSNR estimation needs assumed_ssnr='estimate' and a noise variance")
        ssnr = estimate_radial_ssnr(stack, groups, noise_variance)

        def mult(params, L):
            c = ctf_as_2d(params, L)
            return c * ssnr / (c * c * ssnr + 1.0)

        return _per_group_multiply(stack, groups, mult)
    if not assumed_ssnr > 0:
        raise DomainError("assumed SSNR must be positive")

    def mult(params, L):
        c = ctf_as_2d(params, L)
        return c / (c * c + 1.0 / assumed_ssnr)

    return _per_group_multiply(stack, groups, mult)


def denoise_phaseflip(stack, groups):
    """Multiply every Fourier coefficient by the sign of its group's CTF."""
    return _per_group_multiply(stack, groups, phase_flip_signs)


def disk_std(images, particle_radius):
    data = images.data if isinstance(images, ImageStack) else np.asarray(images)
    if data.ndim == 2:
        data = data[None]
    L = data.shape[-1]
    if not 0 < particle_radius <= L / 2:
        raise DomainError(f"particle radius must lie in (0, {L / 2}]")
    return data[:, radial_mask(L, particle_radius)].std(axis=1)


def estimate_contrast(denoised, particle_radius, reference=None):
    """
    Contrast score of every denoised image: the standard deviation inside the
    particle disk, normalized by the same statistic of ``reference`` when given
    (typically the estimated mean image), otherwise by the dataset median.

    A median-normalized score is proportional to the image contrast, so with
    contrasts spread over a factor of two a fixed threshold near 1 discards a
    large share of inliers. Normalizing by the mean image avoids this: single
    projections carry more structure than the orientation-averaged mean, while
    denoised pure-noise images fall back towards a damped copy of it.

    :raises UndefinedMetricError: if the normalizer is zero.
    """
    s = disk_std(denoised, particle_radius)
    if reference is not None:
        norm = float(disk_std(reference, particle_radius)[0])
    else:
        norm = float(np.median(s))
    if not norm > 0:
        raise UndefinedMetricError("contrast normalizer is zero (all-zero images)")
    return s / norm


def classify_outliers(scores, threshold=0.95):
    """Boolean outlier labels: ``score < threshold``."""
    if threshold < 0 or np.isnan(threshold):
        raise DomainError("threshold must be non-negative")
    return np.asarray(scores) < threshold
