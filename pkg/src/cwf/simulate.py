"""
Synthetic datasets with known ground truth.

A 3D phantom made of Gaussian blobs is projected analytically (a 3D Gaussian of
width ``s`` integrates along z to a 2D Gaussian of the same width with weight
multiplied by ``sqrt(2 pi) s``) at uniformly random orientations. Projections
are CTF-filtered per defocus group, scaled by a per-image contrast, optionally
replaced by pure noise (outliers), and corrupted by white or colored Gaussian
noise at an exact dataset SNR.

Every image draws its random numbers from its own stream, keyed by
``(seed, stream, image index)``, so results do not depend on batching.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .ctf import CtfParams, ctf_as_2d
from .fb import forward
from .imaging import DomainError, FrequencyGrid, ImageStack, apply_fourier_multiplier, signal_power

logger = logging.getLogger(__name__)

DEFAULT_PHANTOM_SEED = 6454

# stream ids of the per-image generators
_ROTATION, _CONTRAST, _NOISE, _OUTLIER = 0, 1, 2, 3
_BATCH = 512


def image_rng(seed, stream, index):
    """Independent generator for one (stream, image) pair."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream, int(index))))


@dataclass(frozen=True)
class Phantom:
    """
    :param centers: ``(B, 3)`` blob centers in voxels, relative to the volume center.
    :param widths: ``(B,)`` Gaussian standard deviations in voxels.
    :param weights: ``(B,)`` peak densities.
    :param support_radius: Radius that contains every blob center.
    """

    centers: np.ndarray
    widths: np.ndarray
    weights: np.ndarray
    support_radius: float

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        w = np.asarray(self.widths, dtype=np.float64).reshape(-1)
        a = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if c.shape[1] != 3 or not (c.shape[0] == w.size == a.size):
            raise DomainError("phantom needs matching (B, 3) centers, (B,) widths and (B,) weights")
        if np.any(w <= 0) or not np.all(np.isfinite(a)):
            raise DomainError("blob widths must be positive and weights finite")
        if np.any(np.linalg.norm(c, axis=1) > self.support_radius + 1e-12):
            raise DomainError("blob centers must lie within the support radius")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "weights", a)

    @property
    def mass(self):
        return float(np.sum(self.weights * (2 * np.pi) ** 1.5 * self.widths**3))


def default_phantom(L, n_blobs=12, seed=DEFAULT_PHANTOM_SEED):
    """Asymmetric blob phantom scaled to an ``L``-pixel box; the same shape for every ``L``."""
    rng = np.random.default_rng(seed)
    support = 0.28 * L
    dirs = rng.standard_normal((n_blobs, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = support * rng.uniform(0.1, 1.0, n_blobs) ** (1 / 3)
    centers = dirs * radii[:, None]
    widths = L * rng.uniform(0.035, 0.08, n_blobs)
    weights = rng.uniform(0.5, 1.5, n_blobs)
    return Phantom(centers, widths, weights, support)


def rotations_from_quaternions(q):
    """Rotation matrices ``(n, 3, 3)`` from quaternions ``(n, 4)`` (scalar first)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def sample_orientations(n, seed, start=0):
    """
    Uniformly distributed rotations (normalized Gaussian quaternions).

    :param n: Number of rotations.
    :param seed: Integer seed; image ``start + j`` uses its own stream.
    :return: ``(n, 3, 3)`` rotation matrices.
    """
    if n < 1:
        raise DomainError("need at least one orientation")
    q = np.array([image_rng(seed, _ROTATION, start + j).standard_normal(4) for j in range(n)])
    return rotations_from_quaternions(q)


def project_phantom(phantom, rotations, L):
    """
    Analytic projections along z of the rotated phantom.

    :param rotations: ``(3, 3)`` or ``(n, 3, 3)`` proper rotations.
    :return: ``(n, L, L)`` images; pixel ``(i, j)`` sits at ``(x, y) = (j - L//2, i - L//2)``.
    """
    R = np.asarray(rotations, dtype=np.float64)
    if R.ndim == 2:
        R = R[None]
    if np.any(np.abs(np.linalg.det(R) - 1) > 1e-12):
        raise DomainError("orientations must be proper rotations (determinant +1)")
    c = np.einsum("nij,bj->nbi", R, phantom.centers)
    s = phantom.widths
    if np.any(np.abs(c[..., :2]) + 3 * s[None, :, None] > L / 2):
        logger.warning("some blobs extend past the field of view; rendering is truncated")
    t = np.arange(L) - L // 2
    gx = np.exp(-((t[None, None, :] - c[..., 0:1]) ** 2) / (2 * s[None, :, None] ** 2))
    gy = np.exp(-((t[None, None, :] - c[..., 1:2]) ** 2) / (2 * s[None, :, None] ** 2))
    amp = phantom.weights * np.sqrt(2 * np.pi) * s
    return np.einsum("b,nbi,nbj->nij", amp, gy, gx)


def colored_response(L, unit="radians_per_pixel"):
    """
    Noise amplitude response ``1 / sqrt(1 + k^2)``.

    :param unit: Unit of ``k``: ``"radians_per_pixel"`` (``2 pi`` times cycles
        per pixel), ``"cycles_per_image"`` or ``"cycles_per_pixel"``.
    """
    r = FrequencyGrid.create(L).radial_freq
    scale = {"radians_per_pixel": 2 * np.pi, "cycles_per_image": L, "cycles_per_pixel": 1.0}
    if unit not in scale:
        raise DomainError(f"unknown frequency unit {unit!r}")
    k = r * scale[unit]
    return 1.0 / np.sqrt(1.0 + k * k)


@dataclass
class SimulationSpec:
    """
    Parameters of a synthetic dataset. Defocus values are spread evenly over
    ``defocus_range`` (micrometers) across ``n_groups`` groups.
    """

    n: int = 1000
    L: int = 64
    snr: float = 1.0 / 20
    n_groups: int = 10
    defocus_range: tuple = (1.0, 4.0)
    noise_kind: str = "white"
    noise_frequency_unit: str = "radians_per_pixel"
    contrast_range: tuple = (1.0, 1.0)
    outlier_fraction: float = 0.0
    seed: int = 0
    pixel_size: float = 5.0
    voltage: float = 300.0
    spherical_aberration: float = 2.0
    amplitude_contrast: float = 0.07
    b_factor: float = 10.0

    def __post_init__(self):
        if self.n < 1 or self.L < 8 or self.L % 2:
            raise DomainError("need n >= 1 and an even L >= 8")
        if not self.snr > 0:
            raise DomainError("SNR must be positive")
        if self.n_groups < 1:
            raise DomainError("need at least one defocus group")
        if self.noise_kind not in ("white", "colored"):
            raise DomainError(f"unknown noise kind {self.noise_kind!r}")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi:
            raise DomainError("contrast range must satisfy 0 < lo <= hi")
        if not 0 <= self.outlier_fraction < 1:
            raise DomainError("outlier fraction must lie in [0, 1)")

    def ctf_params(self):
        lo, hi = self.defocus_range
        dfs = np.linspace(lo, hi, self.n_groups) if self.n_groups > 1 else np.array([0.5 * (lo + hi)])
        return [
            CtfParams(
                float(df), self.voltage, self.spherical_aberration, self.amplitude_contrast, self.b_factor, self.pixel_size
            )
            for df in dfs
        ]


@dataclass
class GroundTruth:
    """
    Latent quantities of a simulated dataset.

    ``clean`` holds ``alpha_i X_i`` (zero for outliers); ``projections`` the
    unscaled projections ``X_i``.
    """

    clean: np.ndarray
    projections: np.ndarray
    ctf_params: list
    group_id: np.ndarray
    contrast: np.ndarray
    outlier: np.ndarray
    noise_variance: float
    snr: float
    rotations: np.ndarray = field(default=None, repr=False)


def corrupt(clean, spec, ctf_params=None):
    """
    Apply CTFs, contrast, outliers and noise to clean projections.

    :param clean: :class:`ImageStack` or ``(n, L, L)`` clean projections.
    :param spec: :class:`SimulationSpec` (its ``n`` and ``L`` are taken from ``clean``).
    :param ctf_params: Per-group :class:`CtfParams`; ``spec.ctf_params()`` if None.
    :return: ``(noisy ImageStack, GroundTruth)``.
    """
    data = clean.data if isinstance(clean, ImageStack) else np.asarray(clean, dtype=np.float64)
    n, L = data.shape[0], data.shape[-1]
    params = ctf_params if ctf_params is not None else spec.ctf_params()
    D = len(params)
    gid = np.arange(n) % D

    lo, hi = spec.contrast_range
    alpha = np.array([image_rng(spec.seed, _CONTRAST, i).uniform(lo, hi) for i in range(n)])
    n_out = int(round(spec.outlier_fraction * n))
    outlier = np.zeros(n, dtype=bool)
    if n_out:
        outlier[np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_OUTLIER,))).permutation(n)[:n_out]] = True

    scaled = data * alpha[:, None, None]
    scaled[outlier] = 0.0
    # CTF filtering group by group; the noisy stack is built in place
    noisy = np.empty_like(scaled)
    for g in range(D):
        sel = np.flatnonzero(gid == g)
        noisy[sel] = apply_fourier_multiplier(scaled[sel], ctf_as_2d(params[g], L))
    power = signal_power(noisy).mean()
    if not power > 0:
        raise DomainError("the clean stack has no signal power; SNR is unreachable")
    sigma2 = power / spec.snr

    mult = None
    if spec.noise_kind == "colored":
        f = colored_response(L, spec.noise_frequency_unit)
        mult = f / np.sqrt(np.mean(f * f))
    for s in range(0, n, _BATCH):
        idx = range(s, min(s + _BATCH, n))
        noise = np.stack([image_rng(spec.seed, _NOISE, i).standard_normal((L, L)) for i in idx])
        if mult is not None:
            noise = apply_fourier_multiplier(noise, mult)
        noisy[s : s + len(idx)] += np.sqrt(sigma2) * noise

    truth = GroundTruth(scaled, data, list(params), gid, alpha, outlier, float(sigma2), float(spec.snr))
    return ImageStack(noisy, spec.pixel_size, gid), truth


def simulate(spec, phantom=None):
    """
    Generate a full synthetic dataset.

    :return: ``(noisy ImageStack, GroundTruth)``.
    """
    phantom = phantom or default_phantom(spec.L)
    rots = sample_orientations(spec.n, spec.seed)
    clean = project_phantom(phantom, rots, spec.L)
    noisy, truth = corrupt(clean, spec)
    truth.rotations = rots
    logger.info(
        "simulated %d images L=%d, %d groups, SNR=%.4g (%s noise, sigma2=%.4g)",
        spec.n, spec.L, len(truth.ctf_params), spec.snr, spec.noise_kind, truth.noise_variance,
    )
    return noisy, truth


def monte_carlo_covariance(basis, phantom, n=100_000, seed=12345, batch=2000):
    """
    Reference mean and covariance of the clean projection ensemble in the
    Fourier-Bessel basis, from ``n`` random projections (exact transform).

    :return: ``(mean_blocks, covariance_blocks)``.
    """
    sizes = basis.sizes
    sums = [np.zeros(p, dtype=np.complex128) for p in sizes]
    scat = [np.zeros((p, p), dtype=np.complex128) for p in sizes]
    for s in range(0, n, batch):
        m = min(batch, n - s)
        rots = sample_orientations(m, seed, start=s)
        a = forward(basis, project_phantom(phantom, rots, basis.L), method="dense")
        for k, b in enumerate(a.blocks):
            sums[k] += b.sum(axis=0)
            scat[k] += b.T @ b.conj()
    means = [s_ / n for s_ in sums]
    covs = [c / n - np.outer(mu, mu.conj()) for c, mu in zip(scat, means)]
    return means, covs
