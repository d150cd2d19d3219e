import numpy as np
import pytest
from scipy import ndimage, stats

from cwf.ctf import ctf_as_2d
from cwf.fb import forward
from cwf.imaging import DomainError, fft2, ifft2, snr_of_stack
from cwf.noise import estimate_psd_corners
from cwf.simulate import (
    Phantom,
    SimulationSpec,
    colored_response,
    corrupt,
    default_phantom,
    monte_carlo_covariance,
    project_phantom,
    rotations_from_quaternions,
    sample_orientations,
    simulate,
)


def ctf_applied(clean, truth):
    F = fft2(clean)
    for g, p in enumerate(truth.ctf_params):
        F[truth.group_id == g] *= ctf_as_2d(p, clean.shape[-1])
    return ifft2(F)


# ---------------------------------------------------------------- projection


def test_centered_blob_is_rotation_invariant():
    ph = Phantom([[0.0, 0.0, 0.0]], [2.5], [1.0], 1.0)
    imgs = project_phantom(ph, sample_orientations(6, 3), 32)
    assert np.abs(imgs - imgs[0]).max() < 1e-12


def test_projection_conserves_mass():
    # blobs well inside the field of view so no tail is truncated
    ph = Phantom([[6.0, -3.0, 2.0], [-5.0, 4.0, -6.0], [0.0, 0.0, 8.0]], [2.0, 3.0, 1.5], [1.0, 0.6, 1.4], 10.0)
    imgs = project_phantom(ph, sample_orientations(5, 4), 64)
    assert np.allclose(imgs.sum(axis=(1, 2)), ph.mass, rtol=1e-6)


def test_projection_matches_volume_integration_oracle():
    L, h = 32, 0.25
    ph = Phantom([[3.0, -2.0, 4.0], [-4.0, 1.0, -2.0], [0.0, 5.0, 1.0]], [2.5, 3.0, 2.0], [1.0, 0.7, 1.3], 8.0)
    R = sample_orientations(1, 9)[0]
    # density rasterized on a fine grid, then sampled trilinearly along rotated rays
    ax = np.arange(-L / 2, L / 2 + h / 2, h)
    Z, Y, X = np.meshgrid(ax, ax, ax, indexing="ij")
    vol = np.zeros_like(X)
    for c, s, w in zip(ph.centers, ph.widths, ph.weights):
        vol += w * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / (2 * s * s))
    t = np.arange(L) - L // 2
    zs = np.arange(-L / 2, L / 2, 0.5)
    py, px, pz = np.meshgrid(t, t, zs, indexing="ij")
    pts = R.T @ np.stack([px.ravel(), py.ravel(), pz.ravel()])
    idx = (pts[::-1] + L / 2) / h
    ref = ndimage.map_coordinates(vol, idx, order=1).reshape(L, L, -1).sum(-1) * 0.5
    img = project_phantom(ph, R, L)[0]
    assert np.linalg.norm(img - ref) / np.linalg.norm(ref) < 1e-3


def test_improper_rotation_rejected():
    with pytest.raises(DomainError):
        project_phantom(default_phantom(16), -np.eye(3), 16)


def test_blob_outside_field_warns(caplog):
    ph = Phantom([[7.0, 0.0, 0.0]], [2.0], [1.0], 7.0)
    project_phantom(ph, np.eye(3), 16)
    assert "field of view" in caplog.text


def test_phantom_validation():
    with pytest.raises(DomainError):
        Phantom([[5.0, 0, 0]], [1.0], [1.0], 2.0)
    with pytest.raises(DomainError):
        Phantom([[0.0, 0, 0]], [0.0], [1.0], 2.0)


# ---------------------------------------------------------------- orientations


def test_orientations_are_rotations_and_deterministic():
    R = sample_orientations(50, 1)
    assert np.allclose(np.einsum("nij,nkj->nik", R, R), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1)
    assert np.array_equal(R, sample_orientations(50, 1))
    assert np.array_equal(R[10:], sample_orientations(40, 1, start=10))
    with pytest.raises(DomainError):
        sample_orientations(0, 1)


def test_orientations_are_uniform():
    n = 100_000
    rng = np.random.default_rng(0)
    R = rotations_from_quaternions(rng.standard_normal((n, 4)))
    v = R @ np.array([0.3, -0.5, 0.81])
    assert np.linalg.norm(v.mean(0)) < 5 / np.sqrt(n)
    counts, _ = np.histogram(R[:, 2, 2], bins=20, range=(-1, 1))
    assert stats.chisquare(counts).pvalue > 1e-3
    Rs = sample_orientations(2000, 5)
    assert np.linalg.norm(Rs[:, :, 2].mean(0)) < 5 / np.sqrt(2000)


# ---------------------------------------------------------------- corruption


@pytest.mark.parametrize("snr", [1.0, 1 / 60])
def test_snr_is_exact(snr):
    noisy, truth = simulate(SimulationSpec(n=200, L=32, snr=snr, seed=2))
    measured = snr_of_stack(ctf_applied(truth.clean, truth), truth.noise_variance)
    assert measured == pytest.approx(snr, rel=1e-10)


def test_degenerate_spec_is_plain_model():
    noisy, truth = simulate(SimulationSpec(n=50, L=16, seed=3))
    assert np.array_equal(truth.clean, truth.projections)
    assert not truth.outlier.any() and np.all(truth.contrast == 1)
    assert list(truth.group_id[:12]) == [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]
    assert noisy.group_id is not None and np.array_equal(noisy.group_id, truth.group_id)


def test_contrast_and_outliers():
    spec = SimulationSpec(n=400, L=16, seed=4, contrast_range=(0.75, 1.5), outlier_fraction=0.1)
    noisy, truth = simulate(spec)
    assert truth.outlier.sum() == 40
    assert np.all(truth.clean[truth.outlier] == 0)
    assert truth.contrast.min() >= 0.75 and truth.contrast.max() <= 1.5
    inl = ~truth.outlier
    assert np.allclose(truth.clean[inl], truth.contrast[inl, None, None] * truth.projections[inl])


def test_simulation_is_deterministic():
    spec = SimulationSpec(n=30, L=16, seed=5, noise_kind="colored", outlier_fraction=0.1, contrast_range=(0.5, 1))
    a, ta = simulate(spec)
    b, tb = simulate(spec)
    assert np.array_equal(a.data, b.data) and np.array_equal(ta.outlier, tb.outlier)
    c, _ = simulate(SimulationSpec(n=30, L=16, seed=6, noise_kind="colored"))
    assert not np.array_equal(a.data, c.data)


def test_colored_noise_spectrum():
    spec = SimulationSpec(n=1000, L=64, snr=1 / 20, seed=6, noise_kind="colored")
    noisy, truth = simulate(spec)
    noise = noisy.with_data(noisy.data - ctf_applied(truth.clean, truth))
    psd = estimate_psd_corners(noise, 20)
    r = np.linspace(0.05, 0.45, 41)
    ratio = psd(r) * (1 + (2 * np.pi * r) ** 2)
    assert np.abs(ratio / ratio.mean() - 1).max() < 0.15
    f = colored_response(8, "cycles_per_image")
    assert f[4, 4] == 1 and f[4, 5] == pytest.approx(1 / np.sqrt(2))
    with pytest.raises(DomainError):
        colored_response(8, "hertz")


def test_zero_signal_is_rejected():
    with pytest.raises(DomainError):
        corrupt(np.zeros((3, 16, 16)), SimulationSpec(n=3, L=16))


@pytest.mark.parametrize(
    "kwargs",
    [dict(n=0), dict(L=7), dict(snr=0), dict(n_groups=0), dict(noise_kind="pink"),
     dict(contrast_range=(1.0, 0.5)), dict(outlier_fraction=1.0)],
)
def test_spec_validation(kwargs):
    with pytest.raises(DomainError):
        SimulationSpec(**kwargs)


def test_monte_carlo_oracle_matches_direct_moments(basis16):
    ph = default_phantom(16)
    means, covs = monte_carlo_covariance(basis16, ph, n=300, seed=8, batch=128)
    a = forward(basis16, project_phantom(ph, sample_orientations(300, 8), 16), method="dense")
    for k in (0, 2):
        b = a.blocks[k]
        assert np.allclose(means[k], b.mean(0), atol=1e-10)
        ref = (b - b.mean(0)).T @ (b - b.mean(0)).conj() / 300
        assert np.allclose(covs[k], ref, atol=1e-10)
