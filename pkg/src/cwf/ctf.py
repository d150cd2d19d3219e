"""
Isotropic contrast transfer function under the weak-phase approximation.

The CTF used throughout the package is

    c(r) = -[sqrt(1 - w^2) sin(chi) + w cos(chi)] * exp(-B s^2 / 4)
    chi  = pi * lambda * Df * s^2 - pi / 2 * Cs * lambda^3 * s^4

with ``s = r / pixel_size`` the spatial frequency in 1/Angstrom and
``lambda`` the relativistic electron wavelength. Note ``c(0) = -w``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .imaging import DomainError, FrequencyGrid, RadialProfile

# h / sqrt(2 m0 e) in Angstrom * sqrt(V), and e / (2 m0 c^2) in 1/V
_WAVELENGTH_CONST = 12.264259661581491
_RELATIVISTIC_CONST = 0.9784756346927633e-6


def electron_wavelength(voltage_kv):
    """Relativistic electron wavelength in Angstrom for an acceleration voltage in kV."""
    v = float(voltage_kv) * 1e3
    if not v > 0:
        raise DomainError(f"voltage must be positive, got {voltage_kv} kV")
    return _WAVELENGTH_CONST / np.sqrt(v * (1.0 + _RELATIVISTIC_CONST * v))


@dataclass(frozen=True)
class CtfParams:
    """
    Microscope parameters of one defocus group.

    Units: defocus in micrometers, voltage in kV, spherical aberration in mm,
    B-factor in square Angstrom, pixel size in Angstrom.
    """

    defocus: float
    voltage: float = 300.0
    spherical_aberration: float = 2.0
    amplitude_contrast: float = 0.07
    b_factor: float = 0.0
    pixel_size: float = 1.0

    def __post_init__(self):
        if not self.defocus > 0:
            raise DomainError(f"defocus must be positive, got {self.defocus}")
        if not self.voltage > 0:
            raise DomainError(f"voltage must be positive, got {self.voltage}")
        if self.spherical_aberration < 0:
            raise DomainError("spherical aberration must be >= 0")
        if not 0 <= self.amplitude_contrast < 1:
            raise DomainError("amplitude contrast must lie in [0, 1)")
        if self.b_factor < 0:
            raise DomainError("B-factor must be >= 0")
        if not self.pixel_size > 0:
            raise DomainError("pixel size must be positive")

    @property
    def wavelength(self):
        return electron_wavelength(self.voltage)


@dataclass(frozen=True)
class DefocusGroup:
    params: CtfParams
    member_count: int

    def __post_init__(self):
        if self.member_count < 1:
            raise DomainError("a defocus group needs at least one member")


def make_groups(params_list, group_id):
    """
    Build :class:`DefocusGroup` objects from per-group parameters and per-image ids.

    :raises DomainError: if an id has no parameters or a group has no members.
    """
    group_id = np.asarray(group_id)
    counts = np.bincount(group_id, minlength=len(params_list))
    if counts.size > len(params_list):
        raise DomainError(f"group id {counts.size - 1} has no CTF parameters")
    return [DefocusGroup(p, int(c)) for p, c in zip(params_list, counts)]


def _phase(params, s):
    lam = params.wavelength
    df = params.defocus * 1e4
    cs = params.spherical_aberration * 1e7
    return np.pi * lam * df * s**2 - 0.5 * np.pi * cs * lam**3 * s**4


def ctf_values(params, radii):
    """Raw CTF values at radial frequencies given in cycles/pixel."""
    r = np.asarray(radii, dtype=np.float64)
    if r.size and r.min() < 0:
        raise DomainError("radial frequencies must be non-negative")
    s = r / params.pixel_size
    chi = _phase(params, s)
    w = params.amplitude_contrast
    env = np.exp(-params.b_factor * s**2 / 4.0)
    return -(np.sqrt(1.0 - w * w) * np.sin(chi) + w * np.cos(chi)) * env


def eval_ctf(params, radii):
    """
    Evaluate the CTF on a set of radial frequencies.

    :param params: :class:`CtfParams`.
    :param radii: Strictly increasing radial frequencies in cycles/pixel.
    :return: :class:`RadialProfile` of CTF values.
    """
    r = np.asarray(radii, dtype=np.float64)
    return RadialProfile(r, ctf_values(params, r))


def ctf_as_2d(params, grid):
    """CTF evaluated at every bin of a :class:`FrequencyGrid` (real ``L x L`` multiplier)."""
    if isinstance(grid, int):
        grid = FrequencyGrid.create(grid)
    return ctf_values(params, grid.radial_freq)


def sign_map(values):
    """Elementwise sign in ``{-1, +1}`` with ``sign(0) := +1``."""
    return np.where(np.asarray(values) < 0, -1.0, 1.0)


def phase_flip_signs(params, grid):
    """Sign of the CTF on the grid with ``sign(0) := +1``."""
    return sign_map(ctf_as_2d(params, grid))


def ctf_zeros(params, r_max=0.5, samples=20000):
    """
    Radial frequencies in ``(0, r_max]`` where the CTF changes sign, located by
    bracketing on a dense grid and refining with Brent's method.
    """
    r = np.linspace(0.0, r_max, samples)
    c = ctf_values(params, r)
    idx = np.nonzero(np.sign(c[:-1]) * np.sign(c[1:]) < 0)[0]
    return np.array([brentq(lambda t: ctf_values(params, t), r[i], r[i + 1], xtol=1e-14) for i in idx])
