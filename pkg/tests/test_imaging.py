import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwf.imaging import (
    DimensionError,
    DomainError,
    FrequencyGrid,
    ImageStack,
    Metrics,
    RadialProfile,
    UndefinedMetricError,
    apply_fourier_multiplier,
    fft2,
    ifft2,
    mean_relative_mse,
    per_image_relative_mse,
    radial_mask,
    relative_mse,
    signal_power,
    snr_of_stack,
)


def test_constant_image_has_only_dc(rng):
    F = fft2(np.ones((16, 16)))
    dc = F[8, 8]
    assert abs(dc) == pytest.approx(16.0)
    F[8, 8] = 0
    assert np.abs(F).max() < 1e-12


def test_center_delta_has_flat_spectrum():
    x = np.zeros((16, 16))
    x[8, 8] = 1
    assert np.allclose(np.abs(fft2(x)), 1 / 16, atol=1e-15)


@pytest.mark.parametrize("L", [8, 16, 33, 64])
def test_parseval_and_round_trip(rng, L):
    x = rng.standard_normal((3, L, L))
    F = fft2(x)
    assert np.linalg.norm(F) == pytest.approx(np.linalg.norm(x), rel=1e-12)
    assert np.linalg.norm(ifft2(F) - x) / np.linalg.norm(x) < 1e-12


def test_conjugate_symmetry_of_real_transform(rng):
    L = 16
    F = fft2(rng.standard_normal((L, L)))
    # centered grid: bin (i, j) has frequency (j - L/2, i - L/2); its mirror for i, j >= 1 is (L - i, L - j)
    inner = F[1:, 1:]
    assert np.allclose(inner, np.conj(inner[::-1, ::-1]), atol=1e-13)


def test_fft_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        fft2(np.zeros((4, 5)))
    with pytest.raises(DimensionError):
        fft2(np.zeros((0, 0)))


def test_frequency_grid_dihedral_symmetry():
    g = FrequencyGrid.create(16)
    r = g.radial_freq[1:, 1:]
    for t in (r.T, r[::-1, :], r[:, ::-1], np.rot90(r)):
        assert np.array_equal(t, r)
    assert g.radial_freq[8, 8] == 0
    assert g.radial_freq[8, 9] == pytest.approx(1 / 16)


def test_unique_radii_reconstruct_grid():
    g = FrequencyGrid.create(12)
    radii, inv = g.unique_radii()
    assert np.allclose(radii[inv], g.radial_freq)
    assert np.all(np.diff(radii) > 0)


def test_image_stack_invariants():
    with pytest.raises(DimensionError):
        ImageStack(np.zeros((2, 6, 6)))
    with pytest.raises(DimensionError):
        ImageStack(np.zeros((2, 9, 9)))
    with pytest.raises(DomainError):
        ImageStack(np.zeros((1, 8, 8)), pixel_size=0)
    with pytest.raises(DimensionError):
        ImageStack(np.zeros((2, 8, 8)), group_id=[0])
    s = ImageStack(np.zeros((3, 8, 8)), 2.0, [0, 1, 1])
    assert s.n == 3 and s.L == 8
    assert s.subset([2]).group_id.tolist() == [1]


@pytest.mark.parametrize(
    "factor, expected",
    [(1.0, 0.0), (0.0, 1.0), (2.0, 1.0), (0.5, 0.25)],
)
def test_relative_mse_examples(rng, factor, expected):
    t = rng.standard_normal((4, 8, 8))
    assert relative_mse(factor * t, t) == pytest.approx(expected, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3, allow_nan=False))
def test_relative_mse_scale_covariance(alpha):
    t = np.arange(64, dtype=float).reshape(8, 8) - 20
    assert relative_mse(alpha * t, t) == pytest.approx((1 - alpha) ** 2, rel=1e-12, abs=1e-14)


def test_relative_mse_errors():
    with pytest.raises(UndefinedMetricError):
        relative_mse(np.ones(4), np.zeros(4))
    with pytest.raises(DimensionError):
        relative_mse(np.ones(4), np.ones(5))


def test_mean_relative_mse_skips_zero_references(rng):
    t = rng.standard_normal((3, 8, 8))
    t[1] = 0
    e = 0.5 * t
    assert np.isnan(per_image_relative_mse(e, t)[1])
    assert mean_relative_mse(e, t) == pytest.approx(0.25)
    with pytest.raises(UndefinedMetricError):
        mean_relative_mse(e, np.zeros_like(t))


def test_snr_examples(rng):
    x = rng.choice([-1.0, 1.0], size=(5, 8, 8))
    x -= x.mean(axis=(1, 2), keepdims=True)
    x /= x.std(axis=(1, 2), keepdims=True)
    assert snr_of_stack(x, 20) == pytest.approx(1 / 20, rel=1e-12)
    assert snr_of_stack(np.zeros((2, 8, 8)), 1.0) == 0
    with pytest.raises(DomainError):
        snr_of_stack(x, 0)
    with pytest.raises(DimensionError):
        snr_of_stack(np.zeros((0, 8, 8)), 1.0)


def test_snr_scaled_to_target(rng):
    x = rng.standard_normal((10, 16, 16))
    sigma2 = signal_power(x).mean() * 60
    assert snr_of_stack(x, sigma2) == pytest.approx(1 / 60, rel=1e-10)


def test_radial_profile_domain():
    p = RadialProfile([0, 0.5], [1, 3])
    assert p(0.25) == pytest.approx(2)
    with pytest.raises(DomainError):
        p(0.6)
    with pytest.raises(DomainError):
        RadialProfile([0.2, 0.1], [1, 1])


def test_fourier_multiplier_identity_and_mask(rng):
    x = rng.standard_normal((2, 16, 16))
    assert np.allclose(apply_fourier_multiplier(x, np.ones((16, 16))), x)
    m = radial_mask(16, 3)
    assert m[8, 8] and not m[0, 0]
    assert radial_mask(16, 3, outside=True).sum() == 256 - m.sum()


def test_metrics_dict():
    assert set(Metrics(0.1, 0.2, 0.05).as_dict()) == {"relative_mse_images", "relative_mse_cov", "snr"}
