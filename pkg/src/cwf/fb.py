"""
Steerable Fourier-Bessel basis on the band-limited disk of the Fourier plane.

Basis functions are

    psi_{k,q}(xi, theta) = N_{k,q} J_k(R_{k,q} xi / c) exp(i k theta),  xi <= c,

with ``R_{k,q}`` the q-th positive zero of ``J_k`` and ``N_{k,q}`` chosen so
that the functions are orthonormal on the disk. A pair ``(k, q)`` is kept when
``R_{k,q+1} <= 2 pi c (L / 2)``.

Coefficients are continuous inner products ``<F(x), psi_{k,q}>`` where
``F(x)(xi) = sum_n x[n] exp(-2 pi i xi . n)`` is the Fourier transform of the
pixel image. The fast transform evaluates ``F(x)`` on a polar grid by
oversampled FFT plus exponential-of-semicircle gridding, takes an angular FFT
on every ring and integrates radially with Gauss-Legendre quadrature, costing
O(L^3) per image. :func:`analysis_matrix` builds the same map in closed form
(Jacobi-Anger plus Lommel's integral) and serves as the exact reference.

Only ``k >= 0`` blocks are stored; for real images the ``-k`` block is
determined by the ``+k`` one.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from scipy import special

from .imaging import DimensionError, DomainError, ImageStack

logger = logging.getLogger(__name__)

# upper bound on sum_k p_k / L^2; the leading-order count is pi^2 c^2 / 8 <= 0.31
COUNT_CONSTANT = 0.5


def bessel_zeros(k, r_max, step=0.25):
    """
    Positive zeros of ``J_k`` not exceeding ``r_max``.

    Zeros are bracketed by scanning a grid finer than their spacing (which is
    always above 3) and polished by Newton iteration on ``J_k``.
    """
    if r_max <= k:
        return np.empty(0)
    x = np.arange(max(k, 1e-3), r_max + step, step)
    jx = special.jv(k, x)
    idx = np.nonzero(np.sign(jx[:-1]) * np.sign(jx[1:]) < 0)[0]
    # linear interpolation inside the bracket, then Newton
    a, b = x[idx], x[idx + 1]
    fa, fb = jx[idx], jx[idx + 1]
    z = a - fa * (b - a) / (fb - fa)
    for _ in range(30):
        dz = special.jv(k, z) / (0.5 * (special.jv(k - 1, z) - special.jv(k + 1, z)))
        z = z - dz
        if np.all(np.abs(dz) < 1e-15 * np.maximum(z, 1)):
            break
    if z.size and np.max(np.abs(special.jv(k, z))) > 1e-12:
        raise ArithmeticError(f"Bessel zero refinement did not converge for order {k}")
    return z[z <= r_max]


class FbCoeffs:
    """
    Fourier-Bessel coefficients of a set of images.

    ``blocks[k]`` is a complex array of shape ``(n, p_k)``; block 0 is real-valued
    for real images.
    """

    def __init__(self, blocks):
        self.blocks = [np.asarray(b, dtype=np.complex128) for b in blocks]
        ns = {b.shape[0] for b in self.blocks}
        if len(ns) != 1 or any(b.ndim != 2 for b in self.blocks):
            raise DimensionError("every block must be an (n, p_k) array with the same n")

    @property
    def n(self):
        return self.blocks[0].shape[0]

    @property
    def sizes(self):
        return [b.shape[1] for b in self.blocks]

    def __len__(self):
        return self.n

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            index = [index]
        return FbCoeffs([b[index] for b in self.blocks])

    def copy(self):
        return FbCoeffs([b.copy() for b in self.blocks])

    def norm_sq(self):
        """Per-image energy including the implied ``-k`` blocks."""
        e = np.sum(np.abs(self.blocks[0]) ** 2, axis=1)
        for b in self.blocks[1:]:
            e = e + 2 * np.sum(np.abs(b) ** 2, axis=1)
        return e

    def map_blocks(self, func):
        return FbCoeffs([func(k, b) for k, b in enumerate(self.blocks)])

    @classmethod
    def zeros(cls, sizes, n=1):
        return cls([np.zeros((n, p), dtype=np.complex128) for p in sizes])

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        return cls([np.concatenate([p.blocks[k] for p in parts]) for k in range(len(parts[0].blocks))])


def to_real(coeffs):
    """Real coordinates ``[a_0, sqrt2 Re a_1, sqrt2 Im a_1, ...]`` preserving energy."""
    cols = [coeffs.blocks[0].real]
    for b in coeffs.blocks[1:]:
        cols.append(np.sqrt(2) * b.real)
        cols.append(np.sqrt(2) * b.imag)
    return np.concatenate(cols, axis=1)


def from_real(vectors, sizes):
    """Inverse of :func:`to_real`."""
    vectors = np.atleast_2d(vectors)
    blocks = [vectors[:, : sizes[0]].astype(np.complex128)]
    pos = sizes[0]
    for p in sizes[1:]:
        re = vectors[:, pos : pos + p]
        im = vectors[:, pos + p : pos + 2 * p]
        blocks.append((re + 1j * im) / np.sqrt(2))
        pos += 2 * p
    return FbCoeffs(blocks)


@dataclass
class _GriddingPlan:
    oversampled: int
    deconv: np.ndarray
    interp: sps.csr_matrix
    n_half: int


@dataclass(eq=False)
class FbBasis:
    """
    Fourier-Bessel basis for ``L x L`` images with band limit ``c`` (cycles/pixel).

    Build with :func:`build_basis`. The object is immutable in use; transform
    plans are computed lazily and cached on the instance.
    """

    L: int
    c: float
    zeros: list
    norms: list
    radial_nodes: np.ndarray
    radial_weights: np.ndarray
    n_theta: int
    sampling_scale: float = 1.0
    kernel_width: int = 8
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def k_max(self):
        return len(self.zeros) - 1

    @property
    def sizes(self):
        return [len(z) for z in self.zeros]

    @property
    def count(self):
        return int(sum(self.sizes))

    @property
    def real_count(self):
        s = self.sizes
        return s[0] + 2 * sum(s[1:])

    @property
    def n_radial(self):
        return self.radial_nodes.size

    @property
    def profile_radii(self):
        """Radii covering ``[0, c]`` that include every quadrature node."""
        return np.concatenate([[0.0], self.radial_nodes, [self.c]])

    def radial_functions(self, k, xi):
        """Radial parts ``f_{k,q}(xi) = sqrt(2 pi) N J_k(R xi / c)``, shape ``(p_k, len(xi))``."""
        xi = np.asarray(xi, dtype=np.float64)
        z = self.zeros[k]
        return np.sqrt(2 * np.pi) * self.norms[k][:, None] * special.jv(k, z[:, None] * xi[None, :] / self.c)

    def evaluate_fourier(self, k, xi, theta):
        """Values of ``psi_{k,q}`` at polar points; shape ``(p_k,) + xi.shape``."""
        xi = np.asarray(xi, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        z = self.zeros[k][(...,) + (None,) * xi.ndim]
        nrm = self.norms[k][(...,) + (None,) * xi.ndim]
        vals = nrm * special.jv(k, z * xi / self.c) * np.exp(1j * k * theta)
        return np.where(xi <= self.c, vals, 0.0)

    # -- quadrature ---------------------------------------------------------

    def _radial_quadrature_matrices(self):
        if "radial" not in self._cache:
            w = self.radial_weights * self.radial_nodes
            self._cache["radial"] = [
                np.sqrt(2 * np.pi) * self.radial_functions(k, self.radial_nodes) * w
                for k in range(self.k_max + 1)
            ]
        return self._cache["radial"]

    def polar_nodes(self, half=True):
        m = self.n_theta // 2 if half else self.n_theta
        theta = 2 * np.pi * np.arange(m) / self.n_theta
        return self.radial_nodes, theta

    # -- gridding plan ------------------------------------------------------

    def _gridding_plan(self):
        if "grid" in self._cache:
            return self._cache["grid"]
        L = self.L
        M = 2 * L
        w = self.kernel_width
        beta = 2.30 * w
        hw = w / (2.0 * M)

        def kernel(t):
            z = t / hw
            inside = np.abs(z) < 1
            out = np.zeros_like(z)
            out[inside] = np.exp(beta * (np.sqrt(1 - z[inside] ** 2) - 1))
            return out

        # Fourier transform of the kernel at the pixel offsets
        gx, gw = np.polynomial.legendre.leggauss(4 * w + 40)
        t = hw * (gx + 1) / 2
        tw = gw * hw / 2
        n = np.arange(L) - L // 2
        phihat = 2 * np.sum(kernel(t)[:, None] * np.cos(2 * np.pi * t[:, None] * n[None, :]) * tw[:, None], axis=0)
        deconv = 1.0 / np.outer(phihat, phihat)

        rho, theta = self.polar_nodes(half=True)
        xu = (rho[:, None] * np.cos(theta)[None, :]).ravel()
        xv = (rho[:, None] * np.sin(theta)[None, :]).ravel()
        npts = xu.size

        def stencil(coord):
            start = np.ceil(coord * M - w / 2).astype(np.int64)
            idx = start[:, None] + np.arange(w)[None, :]
            vals = kernel(coord[:, None] - idx / M)
            return np.mod(idx, M), vals

        iv, wv = stencil(xv)
        iu, wu = stencil(xu)
        cols = (iv[:, :, None] * M + iu[:, None, :]).reshape(npts, -1)
        vals = (wv[:, :, None] * wu[:, None, :]).reshape(npts, -1) / M**2
        rows = np.repeat(np.arange(npts), w * w)
        interp = sps.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(npts, M * M))
        interp.sum_duplicates()
        plan = _GriddingPlan(M, deconv, interp, self.n_theta // 2)
        self._cache["grid"] = plan
        return plan

    # -- dense reference operators -----------------------------------------

    def analysis_matrix(self):
        """
        Exact complex analysis operator of shape ``(count, L*L)``.

        Row ``(k, q)`` maps a flattened image to ``<F(x), psi_{k,q}>`` using
        ``int_0^c J_k(2 pi r xi) J_k(R xi / c) xi dxi`` in closed form.
        """
        if "analysis" in self._cache:
            return self._cache["analysis"]
        L, c = self.L, self.c
        y, x = np.mgrid[:L, :L] - L // 2
        r2 = (x * x + y * y).ravel()
        phi = np.arctan2(y, x).ravel()
        keys, inv = np.unique(r2, return_inverse=True)
        r = np.sqrt(keys)
        alpha = 2 * np.pi * r
        rows = []
        for k in range(self.k_max + 1):
            z = self.zeros[k]
            beta = z / c
            jk_alpha = special.jv(k, alpha * c)
            jk1 = special.jv(k + 1, z)
            a2 = alpha[None, :] ** 2
            b2 = beta[:, None] ** 2
            denom = a2 - b2
            near = np.abs(denom) < 1e-9 * b2
            safe = np.where(near, 1.0, denom)
            integral = -c * beta[:, None] * jk_alpha[None, :] * jk1[:, None] / safe
            integral = np.where(near, 0.5 * c * c * jk1[:, None] ** 2, integral)
            radial = 2 * np.pi * self.norms[k][:, None] * integral
            ang = (-1j) ** k * np.exp(-1j * k * phi)
            rows.append(radial[:, inv] * ang[None, :])
        mat = np.concatenate(rows, axis=0)
        self._cache["analysis"] = mat
        return mat

    def real_analysis_matrix(self):
        """Analysis operator in the real coordinates of :func:`to_real`; ``(real_count, L*L)``."""
        if "real_analysis" not in self._cache:
            A = self.analysis_matrix()
            parts = [A[: self.sizes[0]].real]
            pos = self.sizes[0]
            for p in self.sizes[1:]:
                blk = A[pos : pos + p]
                parts.append(np.sqrt(2) * blk.real)
                parts.append(np.sqrt(2) * blk.imag)
                pos += p
            self._cache["real_analysis"] = np.concatenate(parts, axis=0)
        return self._cache["real_analysis"]

    def synthesis_matrix(self):
        """
        Right inverse of the analysis operator in real coordinates, ``(real_count, L*L)``.

        Row ``j`` is the image whose coefficients are the ``j``-th unit vector;
        its span is the row space of the analysis operator.
        """
        if "synthesis" not in self._cache:
            F = self.real_analysis_matrix()
            gram = F @ F.T
            self._cache["synthesis"] = np.linalg.solve(gram, F)
        return self._cache["synthesis"]


def build_basis(L, c=0.5, sampling_scale=1.0, kernel_width=8):
    """
    Construct the Fourier-Bessel basis.

    :param L: Image side in pixels (>= 8).
    :param c: Band limit in cycles/pixel, ``0 < c <= 0.5``.
    :param sampling_scale: Multiplier on the ``2 pi c L / 2`` cutoff for ``R_{k,q+1}``.
    :param kernel_width: Gridding kernel width of the fast transform (fine-grid points).
    :return: :class:`FbBasis`.
    """
    L = int(L)
    if L < 8:
        raise DimensionError(f"image side must be >= 8, got {L}")
    if not 0 < c <= 0.5:
        raise DomainError(f"band limit must lie in (0, 0.5], got {c}")
    r_max = 2 * np.pi * c * (L / 2) * sampling_scale
    zeros, norms = [], []
    k = 0
    while True:
        z = bessel_zeros(k, r_max)
        p = z.size - 1
        if p <= 0:
            break
        zk = z[:p]
        zeros.append(zk)
        norms.append(1.0 / (c * np.sqrt(np.pi) * np.abs(special.jv(k + 1, zk))))
        k += 1
    if not zeros:
        raise DomainError("band limit too small: no basis function satisfies the sampling criterion")
    sizes = [z.size for z in zeros]
    if any(a < b for a, b in zip(sizes, sizes[1:])):
        raise ArithmeticError("block sizes are not non-increasing in k")
    if sum(sizes) > COUNT_CONSTANT * L * L:
        raise ArithmeticError("basis count exceeds the O(L^2) bound")

    n_rad = int(math.ceil(4 * c * L))
    gx, gw = np.polynomial.legendre.leggauss(n_rad)
    nodes = (gx + 1) * c / 2
    weights = gw * c / 2
    n_theta = 1 << int(math.ceil(math.log2(math.ceil(16 * c * L))))
    if n_theta <= 2 * len(zeros):
        raise ArithmeticError("angular grid too coarse for the angular band limit")
    basis = FbBasis(L, float(c), zeros, norms, nodes, weights, n_theta, sampling_scale, kernel_width)
    logger.info(
        "FB basis L=%d c=%.3g: k_max=%d, %d functions, %d radial x %d angular nodes",
        L, c, basis.k_max, basis.count, n_rad, n_theta,
    )
    return basis


def _as_images(basis, images):
    data = images.data if isinstance(images, ImageStack) else np.asarray(images, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3 or data.shape[1:] != (basis.L, basis.L):
        raise DimensionError(f"images of shape {data.shape[1:]} do not match basis side {basis.L}")
    return data


def polar_fourier(basis, images, batch=256):
    """
    Fourier transform ``F(x)`` of each image on the half polar grid (``theta < pi``).

    :return: Complex array ``(n, n_radial, n_theta // 2)``.
    """
    data = _as_images(basis, images)
    plan = basis._gridding_plan()
    L, M = basis.L, plan.oversampled
    n = data.shape[0]
    out = np.empty((n, basis.n_radial, plan.n_half), dtype=np.complex128)
    # pixel offset n sits at fine-grid index n mod M
    idx = np.mod(np.arange(L) - L // 2, M)
    for s in range(0, n, batch):
        chunk = data[s : s + batch] * plan.deconv
        pad = np.zeros((chunk.shape[0], M, M))
        pad[:, idx[:, None], idx[None, :]] = chunk
        H = np.fft.fft2(pad).reshape(chunk.shape[0], M * M).T
        re = plan.interp @ np.ascontiguousarray(H.real)
        im = plan.interp @ np.ascontiguousarray(H.imag)
        out[s : s + batch] = (re + 1j * im).T.reshape(-1, basis.n_radial, plan.n_half)
    return out


def forward(basis, images, method="polar", batch=256):
    """
    Fourier-Bessel coefficients of an image stack.

    :param basis: :class:`FbBasis`.
    :param images: :class:`ImageStack` or array ``(n, L, L)`` / ``(L, L)``.
    :param method: ``"polar"`` for the fast gridded transform, ``"dense"`` for
        the exact closed-form operator.
    :return: :class:`FbCoeffs`.
    """
    data = _as_images(basis, images)
    if method == "dense":
        A = basis.analysis_matrix()
        flat = data.reshape(data.shape[0], -1)
        full = flat @ A.T
        offs = np.cumsum([0] + basis.sizes)
        blocks = [full[:, offs[k] : offs[k + 1]] for k in range(basis.k_max + 1)]
        blocks[0] = blocks[0].real.astype(np.complex128)
        return FbCoeffs(blocks)
    if method != "polar":
        raise ValueError(f"unknown transform method {method!r}")

    quad = basis._radial_quadrature_matrices()
    blocks = [[] for _ in range(basis.k_max + 1)]
    for s in range(0, data.shape[0], batch):
        half = polar_fourier(basis, data[s : s + batch])
        ring = np.concatenate([half, np.conj(half)], axis=-1)
        ang = np.fft.fft(ring, axis=-1)[..., : basis.k_max + 1] / basis.n_theta
        for k in range(basis.k_max + 1):
            blocks[k].append(ang[:, :, k] @ quad[k].T)
    blocks = [np.concatenate(b) for b in blocks]
    blocks[0] = blocks[0].real.astype(np.complex128)
    return FbCoeffs(blocks)


def inverse(basis, coeffs):
    """
    Real images from Fourier-Bessel coefficients.

    The synthesis operator is the exact right inverse of the analysis operator,
    so ``forward(inverse(a))`` reproduces ``a`` up to the gridding accuracy.

    :return: Array ``(n, L, L)``.
    """
    if list(coeffs.sizes) != basis.sizes:
        raise DimensionError(f"coefficient block sizes {coeffs.sizes} do not match the basis")
    G = basis.synthesis_matrix()
    flat = to_real(coeffs) @ G
    return flat.reshape(-1, basis.L, basis.L)


def radial_operator_blocks(basis, profile):
    """
    Block matrices of a radially isotropic Fourier multiplier.

    Block ``k`` has entries ``int_0^c profile(xi) f_{k,q}(xi) f_{k,q'}(xi) xi dxi``
    evaluated with the basis quadrature.

    :param profile: :class:`RadialProfile` covering ``[0, c]``.
    :return: List of real symmetric ``(p_k, p_k)`` arrays.
    """
    if not profile.covers(basis.c):
        raise DomainError(
            f"profile covers [{profile.radii[0]:.4g}, {profile.radii[-1]:.4g}], needs [0, {basis.c:.4g}]"
        )
    vals = profile(basis.radial_nodes) * basis.radial_weights * basis.radial_nodes
    blocks = []
    for k in range(basis.k_max + 1):
        f = basis.radial_functions(k, basis.radial_nodes)
        b = (f * vals) @ f.T
        blocks.append(0.5 * (b + b.T))
    return blocks


def noise_covariance_blocks(basis):
    """
    Per-block covariance ``F_k F_k^H`` of the coefficients of unit-variance
    white pixel noise. It differs from the identity because the band-limited
    disk functions are not exactly representable inside the pixel box.
    """
    if "noise" not in basis._cache:
        A = basis.analysis_matrix()
        offs = np.cumsum([0] + basis.sizes)
        out = []
        for k in range(basis.k_max + 1):
            F = A[offs[k] : offs[k + 1]]
            N = F @ F.conj().T
            N = 0.5 * (N + N.conj().T)
            out.append(N.real.copy() if k == 0 else N)
        basis._cache["noise"] = out
    return basis._cache["noise"]


def apply_blocks(blocks, coeffs):
    """Apply per-k matrices to every image's coefficient blocks."""
    return FbCoeffs([coeffs.blocks[k] @ np.asarray(blocks[k]).T for k in range(len(blocks))])


def rotate_coeffs(coeffs, angle):
    """Coefficients of the image rotated counterclockwise by ``angle`` radians."""
    return coeffs.map_blocks(lambda k, b: b * np.exp(-1j * k * angle))
