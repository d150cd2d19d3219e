"""
Noise statistics estimated from the particle-free corners of the images, and
isotropic whitening.

The power spectral density is obtained from a correlogram: the masked
autocorrelation of the corner pixels is averaged over images and over lags of
equal length, extended to an isotropic 2D autocorrelation on the lag grid
``[-L/2, L/2)^2``, tapered by a Parzen lag window reaching zero at
lag ``L/2 - 1``, and Fourier transformed. The PSD is in absolute units, so
white noise of variance ``s`` has a flat PSD equal to ``s`` and whitening by
``psd^(-1/2)`` produces unit-variance noise.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .imaging import (
    DomainError,
    FrequencyGrid,
    ImageStack,
    RadialProfile,
    apply_fourier_multiplier,
    fft2,
    radial_mask,
)

logger = logging.getLogger(__name__)

PSD_FLOOR = 1e-6


class NoCornerError(DomainError):
    """Raised when the particle disk leaves no corner pixels."""


@dataclass(frozen=True)
class NoiseModel:
    """
    :param kind: ``"white"`` or ``"colored"``.
    :param sigma2: Noise variance of the data fed to the estimator; 1 after whitening.
    :param psd_radial: Estimated PSD (colored kind).
    :param whitening_radial: ``psd^(-1/2)`` (colored kind).
    """

    kind: str
    sigma2: float
    psd_radial: RadialProfile = None
    whitening_radial: RadialProfile = None

    def __post_init__(self):
        if self.kind not in ("white", "colored"):
            raise DomainError(f"unknown noise kind {self.kind!r}")
        if self.kind == "colored" and (self.psd_radial is None or self.whitening_radial is None):
            raise DomainError("a colored noise model needs PSD and whitening profiles")

    @classmethod
    def white(cls, sigma2):
        return cls("white", float(sigma2))

    @classmethod
    def colored(cls, psd):
        return cls("colored", 1.0, psd, build_whitening(psd))


def corner_mask(L, particle_radius):
    """Pixels outside both the particle disk and the inscribed disk of the box."""
    if particle_radius >= L / 2:
        raise NoCornerError(f"particle radius {particle_radius} leaves no corners in a {L}-pixel box")
    return radial_mask(L, max(particle_radius, L / 2), outside=True)


def _data(stack):
    data = stack.data if isinstance(stack, ImageStack) else np.asarray(stack, dtype=np.float64)
    return data[None] if data.ndim == 2 else data


def estimate_sigma2_white(stack, particle_radius):
    """Mean-removed variance of the pooled corner pixels."""
    data = _data(stack)
    mask = corner_mask(data.shape[-1], particle_radius)
    return float(np.var(data[:, mask]))


def corner_correlogram(stack, particle_radius, batch=500):
    """
    Radially averaged autocorrelation of the corner pixels.

    :return: ``(squared_lags, values)`` for every integer squared lag length
        with at least one contributing pixel pair, lags within ``[-L/2, L/2)``.
    """
    data = _data(stack)
    L = data.shape[-1]
    mask = corner_mask(L, particle_radius).astype(np.float64)
    P = 2 * L
    msum = np.zeros((P, P))
    for s in range(0, data.shape[0], batch):
        fm = np.fft.fft2(data[s : s + batch] * mask, s=(P, P))
        msum += np.sum(np.abs(fm) ** 2, axis=0)
    corr = np.fft.ifft2(msum).real
    count = np.fft.ifft2(np.abs(np.fft.fft2(mask, s=(P, P))) ** 2).real * data.shape[0]
    lag = np.arange(L) - L // 2
    idx = np.mod(lag, P)
    corr = corr[idx[:, None], idx[None, :]]
    count = np.rint(count[idx[:, None], idx[None, :]])
    r2 = (lag[:, None] ** 2 + lag[None, :] ** 2).ravel()
    keys, inv = np.unique(r2, return_inverse=True)
    tot = np.bincount(inv, weights=corr.ravel())
    cnt = np.bincount(inv, weights=count.ravel())
    ok = cnt > 0.5
    return keys[ok], tot[ok] / cnt[ok]


def parzen_window(t):
    """Parzen lag window on ``|t| <= 1``; its Fourier transform is non-negative."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    inner = 1 - 6 * t**2 + 6 * t**3
    outer = 2 * (1 - t) ** 3
    return np.where(t <= 0.5, inner, np.where(t <= 1, outer, 0.0))


def estimate_psd_corners(stack, particle_radius, refine=1, floor=PSD_FLOOR):
    """
    Isotropic noise PSD estimated from corner pixels.

    With ``refine > 0`` the stack is prewhitened by the current estimate and the
    PSD of the residual (nearly flat, hence free of lag-window smoothing bias)
    multiplies the estimate.

    :param stack: :class:`ImageStack` or ``(n, L, L)`` array.
    :param particle_radius: Radius in pixels of the disk that may contain signal.
    :param refine: Number of prewhitening passes.
    :param floor: PSD values are clamped to at least ``floor`` times the peak.
    :return: :class:`RadialProfile` over the radial frequencies of the ``L x L`` grid.
    """
    data = _data(stack)
    if not 0 < floor < 1:
        raise DomainError("PSD floor must lie in (0, 1)")
    psd = _correlogram_psd(data, particle_radius, floor=floor)
    for _ in range(refine):
        if psd.values.max() <= 0:
            break
        resid = _correlogram_psd(whiten_stack(data, build_whitening(psd)), particle_radius, floor=floor)
        psd = psd.map(lambda v: v * resid.values)
        psd = psd.map(lambda v: np.maximum(v, floor * v.max()))
    return psd


def _correlogram_psd(data, particle_radius, max_lag=None, floor=PSD_FLOOR):
    L = data.shape[-1]
    keys, acf = corner_correlogram(data, particle_radius)
    lag = np.arange(L) - L // 2
    r2 = lag[:, None] ** 2 + lag[None, :] ** 2
    r = np.sqrt(r2)
    # lag lengths with no corner pair are filled by linear interpolation in radius
    acf2d = np.interp(r, np.sqrt(keys), acf)
    exact = np.searchsorted(keys, r2).clip(max=keys.size - 1)
    hit = keys[exact] == r2
    acf2d[hit] = acf[exact[hit]]
    # long lags rest on few pixel pairs; the Parzen lag window keeps the PSD
    # estimate smooth and positive
    acf2d *= parzen_window(r / (max_lag or L // 2 - 1))
    spec = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(acf2d))).real
    radii, inv = FrequencyGrid.create(L).unique_radii()
    vals = np.bincount(inv.ravel(), weights=spec.ravel()) / np.bincount(inv.ravel())
    peak = vals.max()
    if peak <= 0:
        logger.warning("corner PSD is non-positive everywhere; corners carry no noise")
        return RadialProfile(radii, np.zeros_like(vals))
    return RadialProfile(radii, np.maximum(vals, floor * peak))


def build_whitening(psd):
    """Whitening profile ``psd^(-1/2)``; whitened noise has unit variance."""
    if np.any(psd.values <= 0):
        raise DomainError("whitening needs a strictly positive PSD")
    return psd.map(lambda v: 1.0 / np.sqrt(v))


def profile_on_grid(profile, L):
    """Evaluate a radial profile at every centered Fourier bin of an ``L x L`` grid."""
    return profile(FrequencyGrid.create(L).radial_freq)


def whiten_stack(stack, whitening):
    """Apply an isotropic Fourier multiplier to every image."""
    data = _data(stack)
    mult = profile_on_grid(whitening, data.shape[-1])
    out = apply_fourier_multiplier(data, mult)
    return stack.with_data(out) if isinstance(stack, ImageStack) else out


def radially_binned_psd(stack, bins=None):
    """
    Radially binned periodogram of whole images, normalized so white noise of
    variance ``s`` gives ``s``. Used to check flatness of pure-noise stacks.
    """
    data = _data(stack)
    L = data.shape[-1]
    power = np.zeros((L, L))
    for s in range(0, data.shape[0], 500):
        power += np.sum(np.abs(fft2(data[s : s + 500])) ** 2, axis=0)
    power /= data.shape[0]
    r = FrequencyGrid.create(L).radial_freq
    if bins is None:
        bins = np.arange(0, 0.5 + 1e-9, 1.0 / L)
    which = np.digitize(r.ravel(), bins) - 1
    ok = (which >= 0) & (which < len(bins) - 1)
    tot = np.bincount(which[ok], weights=power.ravel()[ok], minlength=len(bins) - 1)
    cnt = np.bincount(which[ok], minlength=len(bins) - 1)
    centers = 0.5 * (bins[:-1] + bins[1:])
    good = cnt > 0
    return centers[good], tot[good] / cnt[good]
