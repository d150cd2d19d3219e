"""
Image containers, centered unitary Fourier transforms, frequency grids and
evaluation metrics shared by the rest of the package.

Conventions
-----------
Pixel ``(i, j)`` of an ``L x L`` image sits at the spatial coordinate
``(x, y) = (j - L // 2, i - L // 2)``, so the origin is the pixel with index
``L // 2`` on both axes. Fourier arrays use the same centering: the zero
frequency is at index ``L // 2`` and frequencies are in cycles/pixel. The
transform is unitary (a ``1/L`` factor per direction), so white noise of
per-pixel variance ``s`` has variance ``s`` in every Fourier bin as well.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    """Raised when array shapes do not match what an operation requires."""


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class UndefinedMetricError(ValueError):
    """Raised when a metric has a zero denominator."""


@dataclass
class ImageStack:
    """
    A stack of ``n`` real ``L x L`` images.

    :param data: Array of shape ``(n, L, L)``.
    :param pixel_size: Pixel size in Angstrom.
    :param group_id: Defocus group index of each image (defaults to all zero).
    """

    data: np.ndarray
    pixel_size: float = 1.0
    group_id: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[1] != data.shape[2]:
            raise DimensionError(f"expected (n, L, L) images, got shape {data.shape}")
        n, L, _ = data.shape
        if n < 1:
            raise DimensionError("an image stack needs at least one image")
        if L < 8 or L % 2:
            raise DimensionError(f"image side must be even and >= 8, got {L}")
        if not self.pixel_size > 0:
            raise DomainError(f"pixel size must be positive, got {self.pixel_size}")
        if self.group_id is None:
            gid = np.zeros(n, dtype=np.int64)
        else:
            gid = np.asarray(self.group_id, dtype=np.int64).reshape(-1)
            if gid.shape[0] != n:
                raise DimensionError(f"{gid.shape[0]} group ids for {n} images")
            if gid.min() < 0:
                raise DomainError("group ids must be non-negative")
        self.data = data
        self.pixel_size = float(self.pixel_size)
        self.group_id = gid

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def L(self):
        return self.data.shape[1]

    def __len__(self):
        return self.n

    def with_data(self, data):
        """Return a stack with the same metadata and new pixel data."""
        return ImageStack(data, self.pixel_size, self.group_id.copy())

    def subset(self, index):
        index = np.asarray(index)
        return ImageStack(self.data[index], self.pixel_size, self.group_id[index])


@dataclass(frozen=True)
class RadialProfile:
    """
    A real function of radial frequency sampled at strictly increasing radii.

    Evaluation between samples is linear; outside ``[radii[0], radii[-1]]``
    the profile is undefined and ``__call__`` raises.
    """

    radii: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if radii.shape != values.shape or radii.size == 0:
            raise DimensionError("radii and values must be non-empty and of equal length")
        if radii[0] < 0 or np.any(np.diff(radii) <= 0):
            raise DomainError("radii must be strictly increasing and start at >= 0")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "values", values)

    def covers(self, r_max, r_min=0.0, tol=1e-12):
        return self.radii[0] <= r_min + tol and self.radii[-1] >= r_max - tol

    def __call__(self, r):
        r = np.asarray(r, dtype=np.float64)
        lo, hi = self.radii[0], self.radii[-1]
        if r.size and (r.min() < lo - 1e-12 or r.max() > hi + 1e-12):
            raise DomainError(
                f"radii [{r.min():.4g}, {r.max():.4g}] outside profile domain [{lo:.4g}, {hi:.4g}]"
            )
        return np.interp(r, self.radii, self.values)

    def map(self, func):
        return RadialProfile(self.radii, func(self.values))


@dataclass(frozen=True)
class FrequencyGrid:
    """Radial frequency (cycles/pixel) and angle of every centered Fourier bin."""

    L: int
    radial_freq: np.ndarray
    angle: np.ndarray

    @classmethod
    def create(cls, L):
        v, u = frequency_axes(L)
        radial = np.hypot(u, v)
        angle = np.arctan2(v, u)
        radial.flags.writeable = False
        angle.flags.writeable = False
        return cls(L, radial, angle)

    def unique_radii(self):
        """Sorted distinct radial frequencies of the grid with an inverse index."""
        # squared integer radii are exact, so grouping is bit-stable
        v, u = np.mgrid[: self.L, : self.L] - self.L // 2
        r2 = (u * u + v * v).ravel()
        keys, inverse = np.unique(r2, return_inverse=True)
        return np.sqrt(keys) / self.L, inverse.reshape(self.L, self.L)


def frequency_axes(L):
    """Return ``(v, u)`` meshes of frequencies along axis 0 and axis 1."""
    f = (np.arange(L) - L // 2) / L
    return np.meshgrid(f, f, indexing="ij")


def _check_square(x):
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2] or x.shape[-1] == 0:
        raise DimensionError(f"expected square (..., L, L) input, got shape {x.shape}")
    return x


def fft2(x):
    """
    Centered unitary 2D DFT over the last two axes.

    :param x: Real or complex array of shape ``(..., L, L)``.
    :return: Complex array of the same shape with the zero frequency at ``L // 2``.
    """
    x = _check_square(x)
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes)


def ifft2(X, real=True):
    """Inverse of :func:`fft2`; returns the real part unless ``real`` is False."""
    X = _check_square(X)
    axes = (-2, -1)
    x = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(X, axes=axes), norm="ortho"), axes=axes)
    return x.real if real else x


def apply_fourier_multiplier(images, multiplier, batch=512):
    """
    Multiply every image's centered spectrum by ``multiplier`` and return real images.

    Stacks are processed ``batch`` images at a time to bound the complex workspace.
    """
    images = _check_square(images)
    if images.ndim == 2:
        return ifft2(fft2(images) * multiplier)
    out = np.empty(images.shape, dtype=np.float64)
    for s in range(0, images.shape[0], batch):
        out[s : s + batch] = ifft2(fft2(images[s : s + batch]) * multiplier)
    return out


def radial_mask(L, radius, outside=False):
    """Boolean mask of pixels with distance from the center ``<= radius`` (or ``>`` if outside)."""
    y, x = np.mgrid[:L, :L] - L // 2
    r = np.hypot(x, y)
    return r > radius if outside else r <= radius


def relative_mse(estimate, truth):
    """
    Relative squared error ``||truth - estimate||^2 / ||truth||^2`` (Frobenius).

    :raises UndefinedMetricError: if ``truth`` is identically zero.
    """
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise DimensionError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    denom = np.sum(np.abs(truth) ** 2)
    if denom == 0:
        raise UndefinedMetricError("relative MSE undefined for an all-zero reference")
    return float(np.sum(np.abs(truth - estimate) ** 2) / denom)


def per_image_relative_mse(estimates, truths):
    """Relative MSE of each image pair; images with a zero reference give NaN."""
    estimates = np.asarray(estimates)
    truths = np.asarray(truths)
    if estimates.shape != truths.shape:
        raise DimensionError(f"shape mismatch {estimates.shape} vs {truths.shape}")
    num = np.sum((truths - estimates) ** 2, axis=(-2, -1))
    den = np.sum(truths**2, axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def mean_relative_mse(estimates, truths):
    """Average of :func:`per_image_relative_mse` over images with a nonzero reference."""
    vals = per_image_relative_mse(estimates, truths)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise UndefinedMetricError("no image has a nonzero reference")
    return float(vals.mean())


def signal_power(images):
    """Mean-removed per-image power (variance over pixels) of each image."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    return images.var(axis=(-2, -1))


def snr_of_stack(clean_ctf_images, noise_variance):
    """
    Dataset-average SNR: mean per-image signal power of the CTF-affected clean
    images divided by the per-pixel noise variance.

    Signal power is the mean-removed pixel variance of each image.
    """
    data = clean_ctf_images.data if isinstance(clean_ctf_images, ImageStack) else clean_ctf_images
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0:
        raise DimensionError("empty stack")
    if not noise_variance > 0:
        raise DomainError("noise variance must be positive")
    return float(signal_power(data).mean() / noise_variance)


@dataclass
class Metrics:
    relative_mse_images: float = float("nan")
    relative_mse_cov: float = float("nan")
    snr: float = float("nan")

    def as_dict(self):
        return {
            "relative_mse_images": self.relative_mse_images,
            "relative_mse_cov": self.relative_mse_cov,
            "snr": self.snr,
        }
