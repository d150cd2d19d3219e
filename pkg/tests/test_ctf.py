import numpy as np
import pytest

from cwf.ctf import (
    CtfParams,
    DefocusGroup,
    ctf_as_2d,
    ctf_zeros,
    electron_wavelength,
    eval_ctf,
    make_groups,
    phase_flip_signs,
    sign_map,
)
from cwf.imaging import DomainError, FrequencyGrid


def analytic_zero(params, m=1):
    """m-th zero of the CTF from chi(s) = m pi - arcsin(w), solved as a quadratic in s^2."""
    lam = electron_wavelength(params.voltage)
    df, cs = params.defocus * 1e4, params.spherical_aberration * 1e7
    chi = m * np.pi - np.arcsin(params.amplitude_contrast)
    a, b = 0.5 * np.pi * cs * lam**3, np.pi * lam * df
    u = (b - np.sqrt(b * b - 4 * a * chi)) / (2 * a)
    return np.sqrt(u) * params.pixel_size


def test_wavelength_at_300kv():
    # tabulated relativistic value 0.019687 Angstrom
    assert electron_wavelength(300) == pytest.approx(0.019687, abs=2e-6)
    with pytest.raises(DomainError):
        electron_wavelength(0)


def test_dc_value_is_minus_amplitude_contrast():
    p = CtfParams(2.0, amplitude_contrast=0.07, b_factor=10, pixel_size=3)
    assert eval_ctf(p, [0.0]).values[0] == pytest.approx(-0.07, abs=1e-15)
    assert ctf_as_2d(p, 16)[8, 8] == pytest.approx(-0.07, abs=1e-15)


def test_paper_parameters_accepted():
    p = CtfParams(1.5, voltage=300, spherical_aberration=2, amplitude_contrast=0.07, b_factor=10)
    assert np.all(np.isfinite(eval_ctf(p, np.linspace(0, 0.5 * np.sqrt(2), 50)).values))


@pytest.mark.parametrize("bad", [dict(defocus=0), dict(voltage=-1), dict(amplitude_contrast=1.0), dict(b_factor=-1)])
def test_invalid_parameters(bad):
    kw = dict(defocus=1.0)
    kw.update(bad)
    with pytest.raises(DomainError):
        CtfParams(**kw)


def test_negative_radii_rejected():
    with pytest.raises(DomainError):
        eval_ctf(CtfParams(1.0), [-0.1, 0.2])


def test_bounded_without_envelope():
    r = np.linspace(0, 0.5 * np.sqrt(2), 2000)
    for df in (0.5, 1.0, 4.0):
        assert np.abs(eval_ctf(CtfParams(df, pixel_size=1.5), r).values).max() <= 1 + 1e-12


def test_envelope_bound():
    p = CtfParams(2.0, b_factor=50, pixel_size=2)
    r = np.linspace(0, 0.5 * np.sqrt(2), 500)
    s = r / p.pixel_size
    assert np.all(np.abs(eval_ctf(p, r).values) * np.exp(p.b_factor * s**2 / 4) <= 1 + 1e-12)


@pytest.mark.parametrize("df", [1.0, 2.5, 4.0])
def test_zero_locations_match_analytic_oracle(df):
    p = CtfParams(df, b_factor=10, pixel_size=5)
    zs = ctf_zeros(p, 0.5)
    for m, z in enumerate(zs[:3], start=1):
        assert z == pytest.approx(analytic_zero(p, m), rel=1e-9)


def test_higher_defocus_moves_first_zero_inward():
    z1 = analytic_zero(CtfParams(1.0, pixel_size=5))
    z4 = analytic_zero(CtfParams(4.0, pixel_size=5))
    assert z4 < z1
    assert ctf_zeros(CtfParams(4.0, pixel_size=5))[0] < ctf_zeros(CtfParams(1.0, pixel_size=5))[0]


def test_2d_multiplier_is_isotropic_and_matches_profile():
    L = 24
    g = FrequencyGrid.create(L)
    p = CtfParams(2.0, b_factor=10, pixel_size=4)
    c2 = ctf_as_2d(p, g)
    radii, inv = g.unique_radii()
    prof = eval_ctf(p, radii).values
    assert np.abs(c2 - prof[inv]).max() < 1e-14
    inner = c2[1:, 1:]
    assert np.abs(inner - inner.T).max() < 1e-14
    assert np.abs(inner - np.rot90(inner)).max() < 1e-14


def test_phase_flip_signs():
    p = CtfParams(2.0, pixel_size=5)
    L = 64
    s = phase_flip_signs(p, L)
    assert set(np.unique(s)) <= {-1.0, 1.0}
    assert s[L // 2, L // 2] == -1
    # zero amplitude contrast: c(0) = 0 maps to +1
    assert phase_flip_signs(CtfParams(2.0, amplitude_contrast=0.0), L)[L // 2, L // 2] == 1


def test_phase_flip_changes_at_oracle_zeros():
    p = CtfParams(3.0, pixel_size=5)
    zs = [analytic_zero(p, m) for m in (1, 2, 3)]
    r = np.sort(np.concatenate([np.array(zs) - 1e-6, np.array(zs) + 1e-6]))
    c = eval_ctf(p, r).values
    assert np.all(np.sign(c[0::2]) != np.sign(c[1::2]))


def test_sign_map_of_positive_profile_is_all_plus():
    assert np.all(sign_map(np.linspace(0.0, 1.0, 50)) == 1)
    assert sign_map([-0.5, 0.0, 0.5]).tolist() == [-1.0, 1.0, 1.0]


def test_groups_partition():
    ps = [CtfParams(1.0), CtfParams(2.0)]
    groups = make_groups(ps, [0, 1, 1, 0, 1])
    assert [g.member_count for g in groups] == [2, 3]
    assert sum(g.member_count for g in groups) == 5
    with pytest.raises(DomainError):
        make_groups(ps, [0, 1, 2])
    with pytest.raises(DomainError):
        make_groups(ps, [0, 0])
    with pytest.raises(DomainError):
        DefocusGroup(ps[0], 0)
