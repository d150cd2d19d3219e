"""
Mean and block-diagonal covariance estimation from CTF-affected, noisy
Fourier-Bessel coefficients.

For every angular frequency ``k`` the images contribute through defocus-group
sufficient statistics (count ``d_g``, coefficient sum ``s_g`` and scatter
``T_g = sum Y Y^H``), so the cost of every step after the basis transform is
independent of the number of images.

The covariance solves the least-squares normal equations

    L(Sigma) = sum_g d_g G_g Sigma G_g = B,      G_g = A_g^T A_g,
    B = sum_g A_g C_g A_g - sigma^2 sum_g d_g A_g N A_g,

where ``C_g`` is the group scatter around the CTF-filtered mean and ``N`` the
covariance of unit white pixel noise in the coefficient block (identity for an
exactly orthonormal transform). With ``S^2 = sigma^2 sum_g d_g A_g N A_g`` the
normalized matrix ``S^-1 M S^-1`` (``M = B + S^2``) behaves like a sample
covariance with identity population covariance under pure noise. Its spikes
above the Marchenko-Pastur bulk are detected, shrunk, and the normalized
system ``S^-1 L(S^-1 X S^-1) S^-1 = shrunk RHS`` is solved by conjugate
gradients on Hermitian matrices; ``Sigma = S^-1 X S^-1``.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .imaging import DimensionError, DomainError

logger = logging.getLogger(__name__)

# Tracy-Widom quantiles (real beta=1, complex beta=2) at 1 - alpha
_TW_QUANTILES = {
    1: {0.10: 0.4501, 0.05: 0.9793, 0.01: 2.0234, 0.001: 3.2724},
    2: {0.10: -0.5969, 0.05: -0.2325, 0.01: 0.4802, 0.001: 1.3349},
}


class SingularSystemError(ArithmeticError):
    """Raised when a linear system has no unique solution."""


@dataclass
class EstimatorConfig:
    """
    :param lam: Ridge regularization of the mean estimate (>= 0).
    :param cg_tol: Relative residual at which CG stops.
    :param cg_max_iter: Iteration cap for CG.
    :param shrinkage: Apply rank detection and eigenvalue shrinkage to the normalized RHS.
    :param invariant_mean: Keep only the ``k = 0`` block of the mean (rotation-invariant ensemble).
    :param rank_alpha: False-alarm level of the sequential rank test.
    :param null_tol: Relative eigenvalue below which a direction of ``S^2`` counts as null.
    :param cg_method: ``"cg"`` (conjugate gradients, error decreases monotonically in the
        operator norm) or ``"cr"`` (conjugate residuals, residual norm non-increasing).
    """

    lam: float = 1.0
    cg_tol: float = 1e-8
    cg_max_iter: int = 200
    shrinkage: bool = True
    invariant_mean: bool = True
    rank_alpha: float = 0.01
    null_tol: float = 1e-10
    cg_method: str = "cg"

    def __post_init__(self):
        if self.lam < 0:
            raise DomainError("lambda must be >= 0")
        if not 0 < self.cg_tol < 1:
            raise DomainError("cg_tol must lie in (0, 1)")
        if self.cg_max_iter < 1:
            raise DomainError("cg_max_iter must be >= 1")
        if self.cg_method not in ("cg", "cr"):
            raise DomainError(f"unknown CG method {self.cg_method!r}")
        if self.rank_alpha not in _TW_QUANTILES[1]:
            raise DomainError(f"rank_alpha must be one of {sorted(_TW_QUANTILES[1])}")


class GroupStatistics:
    """
    Per-group, per-block sufficient statistics of coefficient vectors.

    Accumulation is associative: statistics of disjoint image sets can be
    computed separately and merged.
    """

    def __init__(self, sizes, n_groups):
        self.sizes = list(sizes)
        self.n_groups = int(n_groups)
        self.counts = np.zeros(self.n_groups, dtype=np.int64)
        self.sums = [np.zeros((self.n_groups, p), dtype=np.complex128) for p in self.sizes]
        self.scatter = [np.zeros((self.n_groups, p, p), dtype=np.complex128) for p in self.sizes]

    @classmethod
    def from_coeffs(cls, coeffs, group_id, n_groups=None):
        group_id = np.asarray(group_id, dtype=np.int64)
        if n_groups is None:
            n_groups = int(group_id.max()) + 1
        stats = cls(coeffs.sizes, n_groups)
        stats.update(coeffs, group_id)
        return stats

    @property
    def n(self):
        return int(self.counts.sum())

    def update(self, coeffs, group_id):
        group_id = np.asarray(group_id, dtype=np.int64)
        if group_id.shape != (coeffs.n,):
            raise DimensionError(f"{group_id.shape[0]} group ids for {coeffs.n} images")
        if coeffs.sizes != self.sizes:
            raise DimensionError("coefficient block sizes do not match the statistics")
        if group_id.min() < 0 or group_id.max() >= self.n_groups:
            raise DomainError("group id out of range")
        self.counts += np.bincount(group_id, minlength=self.n_groups)
        for g in np.unique(group_id):
            sel = group_id == g
            for k, b in enumerate(coeffs.blocks):
                y = b[sel]
                self.sums[k][g] += y.sum(axis=0)
                self.scatter[k][g] += y.T @ y.conj()
        return self

    def merge(self, other):
        if other.sizes != self.sizes or other.n_groups != self.n_groups:
            raise DimensionError("cannot merge statistics of different shapes")
        self.counts += other.counts
        for k in range(len(self.sizes)):
            self.sums[k] += other.sums[k]
            self.scatter[k] += other.scatter[k]
        return self


@dataclass
class MeanEstimate:
    blocks: list

    @property
    def sizes(self):
        return [b.size for b in self.blocks]


@dataclass
class BlockDiagnostics:
    k: int
    p: int
    gamma: float
    rank: int
    cg_iterations: int
    cg_residual: float
    null_dims: int
    top_eigenvalues: list = field(default_factory=list)
    residual_history: list = field(default_factory=list, repr=False)
    # full descending spectrum of the normalized matrix; kept out of reports
    eigenvalues: np.ndarray = field(default=None, repr=False)

    def as_dict(self):
        return {
            "k": self.k,
            "p_k": self.p,
            "gamma_k": self.gamma,
            "rank": self.rank,
            "cg_iterations": self.cg_iterations,
            "cg_residual": self.cg_residual,
            "null_dims": self.null_dims,
            "top_eigenvalues": list(self.top_eigenvalues),
        }


@dataclass
class BlockCovariance:
    """Per-``k`` Hermitian covariance blocks with per-block diagnostics."""

    blocks: list
    diagnostics: list = field(default_factory=list)

    @property
    def sizes(self):
        return [b.shape[0] for b in self.blocks]

    @property
    def retained_eigs(self):
        """Number of nonzero eigenvalues, counting the implied ``-k`` blocks."""
        total = 0
        for k, b in enumerate(self.blocks):
            if b.size == 0:
                continue
            ev = np.linalg.eigvalsh(b)
            nz = int(np.sum(ev > 1e-12 * max(ev.max(), 1e-300)))
            total += nz if k == 0 else 2 * nz
        return total


def _hermitize(x):
    return 0.5 * (x + x.conj().T)


def _check_blocks(stats, ctf_blocks):
    if len(ctf_blocks) != stats.n_groups:
        raise DimensionError(f"{len(ctf_blocks)} CTF block sets for {stats.n_groups} groups")
    for g, blocks in enumerate(ctf_blocks):
        if [np.shape(b)[0] for b in blocks] != stats.sizes:
            raise DimensionError(f"CTF blocks of group {g} do not match the basis")


def _noise_block(noise_blocks, k, p):
    return np.eye(p) if noise_blocks is None else np.asarray(noise_blocks[k])


def estimate_mean(stats, ctf_blocks, lam=1.0, invariant_mean=False):
    """
    Ridge-regularized least-squares mean,
    ``mu = (sum_g d_g A_g^T A_g + lam I)^-1 sum_g A_g^T s_g`` per block.

    :param stats: :class:`GroupStatistics`.
    :param ctf_blocks: Per group, the list of per-``k`` CTF blocks.
    :param lam: Regularization (>= 0).
    :param invariant_mean: Zero every ``k > 0`` block.
    :raises SingularSystemError: when the system is singular (use ``lam > 0``).
    """
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    _check_blocks(stats, ctf_blocks)
    out = []
    for k, p in enumerate(stats.sizes):
        if invariant_mean and k > 0:
            out.append(np.zeros(p, dtype=np.complex128))
            continue
        lhs = lam * np.eye(p)
        rhs = np.zeros(p, dtype=np.complex128)
        for g in range(stats.n_groups):
            A = ctf_blocks[g][k]
            lhs = lhs + stats.counts[g] * (A.T @ A)
            rhs = rhs + A.T @ stats.sums[k][g]
        cond = np.linalg.cond(lhs)
        if not np.isfinite(cond) or cond > 1e14:
            raise SingularSystemError(
                f"mean system for block {k} is singular (condition {cond:.3g}); use lambda > 0"
            )
        mu = np.linalg.solve(lhs, rhs)
        out.append(mu.real.astype(np.complex128) if k == 0 else mu)
    return MeanEstimate(out)


def assemble_rhs(stats, ctf_blocks, mean, sigma2, noise_blocks=None):
    """
    Right-hand side ``B`` of the normal equations for every block.

    :return: ``(B_blocks, M_blocks, S2_blocks)``, where ``M`` is the CTF-weighted
        scatter and ``S2 = sigma^2 sum_g d_g A_g N A_g`` its pure-noise expectation.
    """
    if sigma2 < 0:
        raise DomainError("sigma2 must be >= 0")
    _check_blocks(stats, ctf_blocks)
    B, M, S2 = [], [], []
    for k, p in enumerate(stats.sizes):
        N = _noise_block(noise_blocks, k, p)
        mk = np.zeros((p, p), dtype=np.complex128)
        sk = np.zeros((p, p), dtype=np.complex128)
        mu = mean.blocks[k]
        for g in range(stats.n_groups):
            A = ctf_blocks[g][k]
            d = stats.counts[g]
            if d == 0:
                continue
            m = A @ mu
            s = stats.sums[k][g]
            C = stats.scatter[k][g] - np.outer(s, m.conj()) - np.outer(m, s.conj()) + d * np.outer(m, m.conj())
            mk += A.T @ C @ A
            sk += d * (A.T @ N @ A)
        mk = _hermitize(mk)
        sk = _hermitize(sigma2 * sk)
        M.append(mk)
        S2.append(sk)
        B.append(mk - sk)
    return B, M, S2


def apply_L(sigma_blocks, counts, ctf_blocks):
    """Matrix-free ``L(Sigma) = sum_g d_g G_g Sigma G_g`` with ``G_g = A_g^T A_g``, per block."""
    out = []
    for k, S in enumerate(sigma_blocks):
        acc = np.zeros_like(S, dtype=np.complex128)
        for g, d in enumerate(counts):
            if d == 0:
                continue
            A = ctf_blocks[g][k]
            G = A.T @ A
            acc += d * (G @ S @ G)
        out.append(acc)
    return out


@dataclass
class _Normalizer:
    """Range basis ``P`` and eigenvalues ``e`` of ``S^2``; ``S^-1 = P diag(e^-1/2) P^H``."""

    P: np.ndarray
    e: np.ndarray
    null_dims: int

    @property
    def r(self):
        return self.e.size

    def to_reduced(self, X):
        """``D^-1/2 P^H X P D^-1/2``: ``S^-1 X S^-1`` in range coordinates."""
        w = 1.0 / np.sqrt(self.e)
        return (self.P.conj().T @ X @ self.P) * np.outer(w, w)

    def from_reduced(self, Xr):
        """``S^-1 X S^-1`` for ``X`` given in range coordinates."""
        w = 1.0 / np.sqrt(self.e)
        return self.P @ (Xr * np.outer(w, w)) @ self.P.conj().T


def _normalizer(S2, null_tol):
    e, V = np.linalg.eigh(_hermitize(S2))
    top = max(e.max(), 0.0) if e.size else 0.0
    keep = e > null_tol * top if top > 0 else np.zeros(e.shape, bool)
    nd = int(e.size - keep.sum())
    return _Normalizer(V[:, keep], e[keep], nd)


def _cg_hermitian(apply_T, rhs, tol, max_iter):
    """Conjugate gradients on Hermitian matrices with inner product ``Re tr(X^H Y)``."""
    X = np.zeros_like(rhs)
    bnorm = np.linalg.norm(rhs)
    history = [1.0]
    if bnorm == 0:
        return X, 0, history
    R = rhs.copy()
    Pd = R.copy()
    rr = np.vdot(R, R).real
    it = 0
    while it < max_iter and history[-1] > tol:
        TP = apply_T(Pd)
        denom = np.vdot(Pd, TP).real
        if denom <= 0:
            break
        a = rr / denom
        X = X + a * Pd
        R = R - a * TP
        rr_new = np.vdot(R, R).real
        it += 1
        history.append(np.sqrt(rr_new) / bnorm)
        Pd = R + (rr_new / rr) * Pd
        rr = rr_new
    return _hermitize(X), it, history


def _cr_hermitian(apply_T, rhs, tol, max_iter):
    """Conjugate residuals: like CG, but minimizes the residual norm over the Krylov space."""
    X = np.zeros_like(rhs)
    bnorm = np.linalg.norm(rhs)
    history = [1.0]
    if bnorm == 0:
        return X, 0, history
    R = rhs.copy()
    TR = apply_T(R)
    Pd, TP = R.copy(), TR.copy()
    rtr = np.vdot(R, TR).real
    it = 0
    while it < max_iter and history[-1] > tol:
        tp2 = np.vdot(TP, TP).real
        if tp2 <= 0 or rtr <= 0:
            break
        a = rtr / tp2
        X = X + a * Pd
        R = R - a * TP
        it += 1
        history.append(np.linalg.norm(R) / bnorm)
        TR = apply_T(R)
        rtr_new = np.vdot(R, TR).real
        b = rtr_new / rtr
        Pd = R + b * Pd
        TP = TR + b * TP
        rtr = rtr_new
    return _hermitize(X), it, history


def _solver(config):
    return _cr_hermitian if config.cg_method == "cr" else _cg_hermitian


def _reduced_ops(norm, counts, ctf_blocks, k):
    w = 1.0 / np.sqrt(norm.e)
    Ks, ds = [], []
    for g, d in enumerate(counts):
        if d == 0:
            continue
        A = ctf_blocks[g][k]
        Ks.append((norm.P.conj().T @ (A.T @ A) @ norm.P) * np.outer(w, w))
        ds.append(float(d))

    def apply_T(X):
        acc = np.zeros_like(X)
        for d, K in zip(ds, Ks):
            acc += d * (K @ X @ K)
        return acc

    return apply_T


def cg_solve(rhs, counts, ctf_blocks, config=None, sigma2=1.0, noise_blocks=None):
    """
    Solve ``L(Sigma) = B`` per block by CG on the ``S``-normalized system.

    :param rhs: Per-block Hermitian right-hand sides ``B``.
    :param counts: Images per defocus group.
    :param ctf_blocks: Per group, per block CTF matrices.
    :param sigma2: Noise variance defining ``S``.
    :return: :class:`BlockCovariance` (not PSD-projected); diagnostics carry
        iteration counts, residual histories and null dimensions.
    """
    config = config or EstimatorConfig()
    counts = np.asarray(counts)
    blocks, diags = [], []
    for k, B in enumerate(rhs):
        p = B.shape[0]
        if np.abs(B - B.conj().T).max(initial=0) > 1e-8 * max(np.abs(B).max(initial=0), 1e-300):
            raise DomainError(f"right-hand side of block {k} is not Hermitian")
        N = _noise_block(noise_blocks, k, p)
        S2 = sum(d * (ctf_blocks[g][k].T @ N @ ctf_blocks[g][k]) for g, d in enumerate(counts)) * sigma2
        norm = _normalizer(S2, config.null_tol)
        if norm.null_dims:
            logger.warning("block %d: %d null directions of S excluded from the solve", k, norm.null_dims)
        X, it, hist = _solver(config)(
            _reduced_ops(norm, counts, ctf_blocks, k), norm.to_reduced(_hermitize(B)), config.cg_tol, config.cg_max_iter
        )
        blocks.append(_hermitize(norm.from_reduced(X)))
        diags.append(BlockDiagnostics(k, p, float("nan"), -1, it, hist[-1], norm.null_dims, residual_history=hist))
    return BlockCovariance(blocks, diags)


def mp_edges(gamma):
    """Edges ``((1 - sqrt(gamma))^2, (1 + sqrt(gamma))^2)`` of the Marchenko-Pastur bulk."""
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    if gamma > 1:
        logger.debug("gamma = %.3g > 1: the lower edge is not the smallest eigenvalue", gamma)
    s = np.sqrt(gamma)
    return (1 - s) ** 2, (1 + s) ** 2


def tw_edge(n, p, beta=1, alpha=0.01):
    """
    Threshold for the largest eigenvalue of a pure-noise ``p``-dimensional
    sample covariance of ``n`` samples at false-alarm level ``alpha``: the
    Tracy-Widom centering and scaling of the largest eigenvalue (normalized by
    ``n``) plus the ``1 - alpha`` quantile.
    """
    if beta == 1:
        a, b = np.sqrt(n - 0.5), np.sqrt(p - 0.5)
    else:
        a, b = np.sqrt(n), np.sqrt(p)
    mu = (a + b) ** 2 / n
    sig = (a + b) * (1 / a + 1 / b) ** (1 / 3) / n
    return mu + _TW_QUANTILES[beta][alpha] * sig


def detect_rank(eigs, gamma, noise_level=1.0, beta=1, alpha=0.01):
    """
    Number of eigenvalues above the pure-noise bulk.

    Sequential test: the ``j``-th largest eigenvalue is a signal spike if it
    exceeds ``noise_level`` times the Tracy-Widom threshold of a noise-only
    matrix of dimension ``p - j`` (with ``n = p / gamma`` samples), whose
    center is the Marchenko-Pastur upper edge ``(1 + sqrt(gamma))^2``.

    :param eigs: Eigenvalues sorted in descending order.
    :param gamma: Aspect ratio ``p / n``.
    :param beta: 1 for real data, 2 for complex.
    :return: Detected rank ``r <= p``.
    """
    eigs = np.asarray(eigs, dtype=np.float64)
    p = eigs.size
    if p == 0:
        return 0
    if np.any(np.diff(eigs) > 1e-12 * max(abs(eigs[0]), 1.0)):
        raise DomainError("eigenvalues must be sorted in descending order")
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    n = p / gamma
    r = 0
    while r < p:
        dim = p - r
        thresh = tw_edge(n, dim, beta, alpha) if dim >= 2 else mp_edges(dim / n)[1]
        if eigs[r] > noise_level * thresh:
            r += 1
        else:
            break
    return r


def shrink_eigenvalues(eigs, gamma, r):
    """
    Operator-norm shrinkage of the top ``r`` eigenvalues of a noise-normalized
    matrix: a sample spike ``y`` above the bulk edge maps to the population
    spike ``l = ((y + 1 - gamma) + sqrt((y + 1 - gamma)^2 - 4 y)) / 2`` and is
    replaced by ``l - 1``; every other eigenvalue becomes 0.
    """
    y = np.asarray(eigs, dtype=np.float64)
    out = np.zeros_like(y)
    edge = (1 + np.sqrt(gamma)) ** 2
    for j in range(min(int(r), y.size)):
        if y[j] < edge:
            continue
        b = y[j] + 1 - gamma
        ell = 0.5 * (b + np.sqrt(max(b * b - 4 * y[j], 0.0)))
        out[j] = ell - 1
    return out


def psd_project(blocks):
    """Nearest positive semidefinite matrix (Frobenius) of every Hermitian block."""
    src = blocks.blocks if isinstance(blocks, BlockCovariance) else blocks
    out = []
    for b in src:
        if b.size == 0:
            out.append(b.copy())
            continue
        e, V = np.linalg.eigh(_hermitize(b))
        e = np.maximum(e, 0.0)
        out.append(_hermitize((V * e) @ V.conj().T))
    if isinstance(blocks, BlockCovariance):
        return BlockCovariance(out, blocks.diagnostics)
    return out


def estimate_covariance(stats, ctf_blocks, sigma2, config=None, noise_blocks=None, mean=None, unwhiten=None):
    """
    Full covariance pipeline: RHS assembly, ``S``-normalization, rank detection
    and shrinkage, CG, PSD projection.

    :param stats: :class:`GroupStatistics` of (whitened, for colored noise) coefficients.
    :param ctf_blocks: Per group, per block CTF matrices.
    :param sigma2: Noise variance (1 for whitened data).
    :param config: :class:`EstimatorConfig`.
    :param noise_blocks: Per block covariance of unit white noise; identity if None.
    :param mean: Precomputed :class:`MeanEstimate` (estimated if None).
    :param unwhiten: Per block ``W^-1`` matrices; when given the returned
        covariance and mean are mapped back by ``W^-1 (.) W^-1``.
    :return: ``(BlockCovariance, MeanEstimate)``.
    """
    config = config or EstimatorConfig()
    t0 = time.perf_counter()
    if mean is None:
        mean = estimate_mean(stats, ctf_blocks, config.lam, config.invariant_mean)
    B, M, S2 = assemble_rhs(stats, ctf_blocks, mean, sigma2, noise_blocks)
    n = stats.n
    blocks, diags = [], []
    for k, p in enumerate(stats.sizes):
        norm = _normalizer(S2[k], config.null_tol)
        if norm.null_dims:
            logger.warning("block %d: %d null directions of S excluded from the solve", k, norm.null_dims)
        gamma = p / n
        Mr = _hermitize(norm.to_reduced(M[k]))
        y, U = np.linalg.eigh(Mr)
        y, U = y[::-1], U[:, ::-1]
        if config.shrinkage:
            rank = detect_rank(y, gamma, beta=1 if k == 0 else 2, alpha=config.rank_alpha)
            shr = shrink_eigenvalues(y, gamma, rank)
            rhs = (U[:, :rank] * shr[:rank]) @ U[:, :rank].conj().T
        else:
            rank = int(np.sum(y > 1))
            rhs = Mr - np.eye(norm.r)
        X, it, hist = _solver(config)(_reduced_ops(norm, stats.counts, ctf_blocks, k), rhs, config.cg_tol, config.cg_max_iter)
        Sig = _hermitize(norm.from_reduced(X))
        blocks.append(Sig)
        diags.append(
            BlockDiagnostics(k, p, gamma, rank, it, hist[-1], norm.null_dims, [float(v) for v in y[:5]], hist, y)
        )
    cov = psd_project(BlockCovariance(blocks, diags))
    if unwhiten is not None:
        cov = BlockCovariance([_hermitize(Wi @ S @ Wi.T) for Wi, S in zip(unwhiten, cov.blocks)], cov.diagnostics)
        mean = MeanEstimate([Wi @ m for Wi, m in zip(unwhiten, mean.blocks)])
    logger.info(
        "covariance: %d blocks, %d retained eigenvalues, %.2f s",
        len(blocks), cov.retained_eigs, time.perf_counter() - t0,
    )
    return cov, mean
