import numpy as np
import pytest

from cwf.ctf import CtfParams, ctf_as_2d
from cwf.imaging import DomainError, FrequencyGrid, ImageStack, RadialProfile, apply_fourier_multiplier, radial_mask
from cwf.noise import (
    PSD_FLOOR,
    NoCornerError,
    NoiseModel,
    build_whitening,
    corner_correlogram,
    corner_mask,
    estimate_psd_corners,
    estimate_sigma2_white,
    parzen_window,
    radially_binned_psd,
    whiten_stack,
)
from cwf.simulate import colored_response

L = 64


@pytest.fixture(scope="module")
def white_stack():
    rng = np.random.default_rng(11)
    return ImageStack(np.sqrt(2.0) * rng.standard_normal((1000, L, L)))


@pytest.fixture(scope="module")
def colored_stack():
    rng = np.random.default_rng(12)
    f = colored_response(L)
    return ImageStack(apply_fourier_multiplier(rng.standard_normal((1000, L, L)), f / np.sqrt(np.mean(f * f))))


def true_colored_psd():
    f = colored_response(L)
    radii, inv = FrequencyGrid.create(L).unique_radii()
    return radii, (1.0 / (1.0 + (2 * np.pi * radii) ** 2)) / np.mean(f * f)


def test_corner_mask_geometry():
    m = corner_mask(L, 20)
    assert not m[L // 2, L // 2] and m[0, 0]
    assert not np.any(m & radial_mask(L, L / 2))
    with pytest.raises(NoCornerError):
        corner_mask(L, L / 2)


def test_white_psd_is_flat_at_the_variance(white_stack):
    psd = estimate_psd_corners(white_stack, 0.4 * L, refine=0)
    assert np.abs(psd.values / 2.0 - 1).max() < 0.10


def test_colored_psd_shape_in_mid_band(colored_stack):
    psd = estimate_psd_corners(colored_stack, 0.4 * L)
    radii, truth = true_colored_psd()
    band = (radii >= 0.1) & (radii <= 0.4)
    ratio = psd.values[band] / truth[band]
    assert np.abs(ratio / ratio.mean() - 1).max() < 0.15


def test_empty_corners_give_negligible_psd(rng):
    x = rng.standard_normal((20, L, L)) * radial_mask(L, 0.3 * L)
    psd = estimate_psd_corners(x, 0.3 * L, refine=0)
    assert psd.values.max() <= 1e-12 * np.mean(x**2)


def test_psd_floor(white_stack):
    psd = estimate_psd_corners(white_stack, 0.4 * L)
    assert psd.values.min() >= PSD_FLOOR * psd.values.max() * (1 - 1e-12)
    w = build_whitening(psd)
    assert w.values.max() <= (PSD_FLOOR * psd.values.max()) ** -0.5 * (1 + 1e-12)
    with pytest.raises(DomainError):
        estimate_psd_corners(white_stack, 0.4 * L, floor=0)


def test_correlogram_is_order_independent(rng):
    x = rng.standard_normal((50, 16, 16))
    k1, v1 = corner_correlogram(x, 4)
    k2, v2 = corner_correlogram(x[rng.permutation(50)], 4, batch=7)
    assert np.array_equal(k1, k2)
    assert np.abs(v1 - v2).max() < 1e-10


def test_whitening_profile():
    radii = np.linspace(0, 0.75, 20)
    assert np.allclose(build_whitening(RadialProfile(radii, np.full(20, 4.0))).values, 0.5)
    k = 2 * np.pi * radii
    w = build_whitening(RadialProfile(radii, 3.0 / (1 + k * k)))
    assert np.allclose(w.values / np.sqrt(1 + k * k), w.values[0])
    with pytest.raises(DomainError):
        build_whitening(RadialProfile(radii, np.linspace(0, 1, 20)))


def test_noise_model_invariant(colored_stack):
    m = NoiseModel.colored(estimate_psd_corners(colored_stack.subset(np.arange(200)), 0.4 * L))
    assert m.sigma2 == 1.0
    assert np.abs(m.whitening_radial.values * np.sqrt(m.psd_radial.values) - 1).max() < 1e-10
    with pytest.raises(DomainError):
        NoiseModel("colored", 1.0)
    with pytest.raises(DomainError):
        NoiseModel("pink", 1.0)


def test_whitening_flattens_colored_noise(colored_stack):
    psd = estimate_psd_corners(colored_stack, 0.4 * L)
    white = whiten_stack(colored_stack, build_whitening(psd))
    centers, values = radially_binned_psd(white)
    band = (centers >= 0.05) & (centers <= 0.45)
    assert np.abs(values[band] / values[band].mean() - 1).max() < 0.10
    assert white.data.var() == pytest.approx(1.0, rel=0.05)
    again = estimate_psd_corners(white, 0.4 * L)
    radii = again.radii
    band = (radii >= 0.05) & (radii <= 0.45)
    assert np.abs(again.values[band] / again.values[band].mean() - 1).max() < 0.10


def test_identity_whitening_is_a_no_op(rng):
    x = rng.standard_normal((3, 16, 16))
    radii = FrequencyGrid.create(16).unique_radii()[0]
    y = whiten_stack(x, RadialProfile(radii, np.ones(radii.size)))
    assert np.abs(y - x).max() < 1e-13


def test_whitening_commutes_with_ctf(rng):
    x = rng.standard_normal((2, 32, 32))
    radii, inv = FrequencyGrid.create(32).unique_radii()
    w = RadialProfile(radii, np.sqrt(1 + (2 * np.pi * radii) ** 2))
    c = ctf_as_2d(CtfParams(2.0, pixel_size=3), 32)
    a = whiten_stack(apply_fourier_multiplier(x, c), w)
    b = apply_fourier_multiplier(whiten_stack(x, w), c)
    assert np.abs(a - b).max() < 1e-10


def test_whitening_profile_must_cover_grid():
    with pytest.raises(DomainError):
        whiten_stack(np.zeros((1, 16, 16)), RadialProfile([0.0, 0.5], [1.0, 1.0]))


def test_sigma2_white_examples(rng):
    x = np.sqrt(2) * rng.standard_normal((1000, L, L))
    assert estimate_sigma2_white(x, 0.4 * L) == pytest.approx(2.0, rel=0.05)
    assert estimate_sigma2_white(np.zeros((3, L, L)), 0.4 * L) == 0
    signal = 10 * rng.standard_normal((200, L, L)) * radial_mask(L, 0.4 * L)
    noise = rng.standard_normal((200, L, L))
    assert estimate_sigma2_white(signal + noise, 0.4 * L) == pytest.approx(1.0, rel=0.05)
    with pytest.raises(NoCornerError):
        estimate_sigma2_white(noise, L / 2)


def test_parzen_window():
    t = np.linspace(-1.5, 1.5, 301)
    w = parzen_window(t)
    assert w[150] == 1 and np.all(w[np.abs(t) >= 1] == 0)
    assert np.all(np.diff(w[150:]) <= 1e-15)
