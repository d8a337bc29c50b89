"""Material models and per-interaction propagation coefficients.

Everything here is a pure function over immutable values:

- ITU-R P.2040 building materials (relative permittivity and conductivity
  as power laws of frequency), with metal treated as a perfect conductor
- Fresnel reflection coefficients for air -> lossy dielectric
- Half-wave dipole gain pattern and its polarization vector
- ITU-R P.526 single knife-edge diffraction loss

Sign convention: for a perfect conductor the TE coefficient is -1 and the TM
coefficient is +1 (field components referred to s-hat and p-hat = s-hat x k).
"""

import math
from collections import namedtuple
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.constants import epsilon_0, speed_of_light

from mmwave_uav_sim.errors import GeometryError, MaterialError

C0 = speed_of_light

# Peak gain of a half-wave dipole, 2.15 dBi
DIPOLE_PEAK_GAIN = 1.643

# Knife-edge approximation is only defined above this clearance parameter
KNIFE_EDGE_NU_MIN = -0.78

ItuModel = namedtuple("ItuModel", ["a", "b", "c", "d", "freq_min_ghz", "freq_max_ghz"])

# eps_real = a * f^b, sigma = c * f^d with f in GHz
ITU_MATERIALS = {
    "vacuum": ItuModel(1.0, 0.0, 0.0, 0.0, 0.001, 100.0),
    "concrete": ItuModel(5.31, 0.0, 0.0326, 0.8095, 1.0, 100.0),
    "brick": ItuModel(3.75, 0.0, 0.038, 0.0, 1.0, 10.0),
    "plasterboard": ItuModel(2.94, 0.0, 0.0116, 0.7076, 1.0, 100.0),
    "wood": ItuModel(1.99, 0.0, 0.0047, 1.0718, 0.001, 100.0),
    "glass": ItuModel(6.27, 0.0, 0.0043, 1.1925, 0.1, 100.0),
    "ceiling_board": ItuModel(1.50, 0.0, 0.0005, 1.1634, 1.0, 100.0),
    "chipboard": ItuModel(2.58, 0.0, 0.0217, 0.78, 1.0, 100.0),
    "floorboard": ItuModel(3.66, 0.0, 0.0044, 1.3515, 50.0, 100.0),
    "very_dry_ground": ItuModel(3.0, 0.0, 0.00015, 2.52, 1.0, 10.0),
    "medium_dry_ground": ItuModel(15.0, -0.1, 0.035, 1.63, 1.0, 10.0),
    "wet_ground": ItuModel(30.0, -0.4, 0.15, 1.3, 1.0, 10.0),
}

# Scattering coefficients S per material family
DEFAULT_SCATTERING = {
    "concrete": 0.4,
    "metal": 0.2,
}


def wavelength(f: float) -> float:
    """Free-space wavelength in metres for a carrier frequency in Hz."""
    if f <= 0:
        raise MaterialError(f"Frequency must be positive, got {f}")
    return C0 / f


@dataclass(frozen=True)
class Material:
    """Electrical description of a surface.

    A PEC material ignores ``eps_real`` and ``sigma`` and reflects with unit
    magnitude. ``scattering_s`` is the fraction of incident field amplitude
    diverted from the specular direction into diffuse scattering.
    """

    name: str
    eps_real: float = 1.0
    sigma: float = 0.0
    is_pec: bool = False
    scattering_s: float = 0.0

    def __post_init__(self) -> None:
        values = (self.eps_real, self.sigma, self.scattering_s)
        if not all(math.isfinite(v) for v in values):
            raise MaterialError(f"Material '{self.name}' has non-finite parameters")
        if not self.is_pec and self.eps_real < 1.0:
            raise MaterialError(
                f"Material '{self.name}': eps_real must be >= 1, got {self.eps_real}"
            )
        if self.sigma < 0.0:
            raise MaterialError(f"Material '{self.name}': sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.scattering_s < 1.0:
            raise MaterialError(
                f"Material '{self.name}': scattering_s must be in [0, 1), got {self.scattering_s}"
            )

    def complex_permittivity(self, f: float) -> complex:
        """eta = eps_r - j * sigma / (2 pi f eps0)."""
        if f <= 0:
            raise MaterialError(f"Frequency must be positive, got {f}")
        return complex(self.eps_real, -self.sigma / (2.0 * math.pi * f * epsilon_0))

    def to_dict(self) -> dict:
        return {
            "eps_real": self.eps_real,
            "sigma": self.sigma,
            "is_pec": self.is_pec,
            "scattering_s": self.scattering_s,
        }


def itu_material(name: str, f: float, scattering_s: Optional[float] = None) -> Material:
    """Build a Material from the ITU-R P.2040 table at frequency ``f`` (Hz).

    Args:
        name: Table entry ("concrete", "metal", "glass", ...).
        f: Carrier frequency in Hz.
        scattering_s: Override for the S coefficient. Defaults to 0.4 for
            concrete, 0.2 for metal and 0.0 for everything else.

    Raises:
        MaterialError: Unknown name or frequency outside the model's range.
    """
    s = scattering_s if scattering_s is not None else DEFAULT_SCATTERING.get(name, 0.0)

    if name == "metal":
        return Material(name="metal", eps_real=1.0, sigma=0.0, is_pec=True, scattering_s=s)

    model = ITU_MATERIALS.get(name)
    if model is None:
        raise MaterialError(f"Unknown ITU material '{name}'")

    f_ghz = f / 1e9
    if not model.freq_min_ghz <= f_ghz <= model.freq_max_ghz:
        raise MaterialError(
            f"Frequency {f_ghz:g} GHz outside validity range "
            f"[{model.freq_min_ghz:g}, {model.freq_max_ghz:g}] GHz for '{name}'"
        )

    eps_real = model.a * f_ghz**model.b
    sigma = model.c * f_ghz**model.d
    return Material(name=name, eps_real=eps_real, sigma=sigma, is_pec=False, scattering_s=s)


def fresnel(material: Material, cos_theta_i: float, f: float) -> tuple[complex, complex]:
    """Fresnel reflection coefficients (gamma_te, gamma_tm) for air -> material.

    Args:
        material: Reflecting material.
        cos_theta_i: Cosine of the incidence angle measured from the normal.
        f: Carrier frequency in Hz.
    """
    if not -1e-12 <= cos_theta_i <= 1.0 + 1e-12:
        raise GeometryError(f"cos_theta_i must be in [0, 1], got {cos_theta_i}")
    if material.is_pec:
        return complex(-1.0, 0.0), complex(1.0, 0.0)

    cos_i = min(max(cos_theta_i, 0.0), 1.0)
    sin2 = 1.0 - cos_i * cos_i
    eta = material.complex_permittivity(f)
    root = complex(np.sqrt(eta - sin2))

    te_den = cos_i + root
    tm_den = eta * cos_i + root
    # Only reachable for a vacuum "material" at exact grazing
    if te_den == 0 or tm_den == 0:
        return complex(-1.0, 0.0), complex(-1.0, 0.0)

    gamma_te = (cos_i - root) / te_den
    gamma_tm = (eta * cos_i - root) / tm_den
    return complex(gamma_te), complex(gamma_tm)


def reflection_power(material: Material, cos_theta_i: float, f: float) -> float:
    """Polarization-averaged |Gamma|^2, used where a path is tracked as scalar power."""
    gamma_te, gamma_tm = fresnel(material, cos_theta_i, f)
    return 0.5 * (abs(gamma_te) ** 2 + abs(gamma_tm) ** 2)


def reflection_power_batch(
    material: Material, cos_theta_i: NDArray[np.float64], f: float
) -> NDArray[np.float64]:
    """Vectorized :func:`reflection_power` for many incidence angles on one material."""
    cos_i = np.clip(np.asarray(cos_theta_i, dtype=np.float64), 0.0, 1.0)
    if material.is_pec:
        return np.ones_like(cos_i)
    sin2 = 1.0 - cos_i * cos_i
    eta = material.complex_permittivity(f)
    root = np.sqrt(eta - sin2.astype(np.complex128))
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma_te = (cos_i - root) / (cos_i + root)
        gamma_tm = (eta * cos_i - root) / (eta * cos_i + root)
    power = 0.5 * (np.abs(gamma_te) ** 2 + np.abs(gamma_tm) ** 2)
    return np.where(np.isfinite(power), power, 1.0)


def effective_reflection(gamma: complex, scattering_s: float) -> complex:
    """Specular coefficient reduced by sqrt(1 - S^2) when diffuse scattering is on."""
    return gamma * math.sqrt(1.0 - scattering_s * scattering_s)


def energy_balance(gamma: complex, scattering_s: float) -> float:
    """|Gamma_eff|^2 + S^2 |Gamma|^2 for one interaction; physical values are <= 1."""
    gamma_eff = effective_reflection(gamma, scattering_s)
    return abs(gamma_eff) ** 2 + scattering_s**2 * abs(gamma) ** 2


class AntennaKind(Enum):
    """Supported element patterns."""

    HALF_WAVE_DIPOLE = "half_wave_dipole"
    ISOTROPIC = "isotropic"


@dataclass(frozen=True)
class AntennaPattern:
    """Antenna element; ``axis`` is the dipole orientation.

    Isotropic elements still use ``axis`` as their polarization reference.
    """

    kind: AntennaKind = AntennaKind.HALF_WAVE_DIPOLE
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        norm = math.sqrt(sum(c * c for c in self.axis))
        if abs(norm - 1.0) > 1e-9:
            raise GeometryError(f"Antenna axis must be unit length, got |axis|={norm}")

    @property
    def axis_vector(self) -> NDArray[np.float64]:
        return np.asarray(self.axis, dtype=np.float64)

    def polarization(self, direction: NDArray[np.float64]) -> NDArray[np.float64]:
        """Unit far-field polarization for a wave travelling along ``direction``.

        The axis component perpendicular to the propagation direction. Along
        the axis itself the projection vanishes; a fixed perpendicular vector
        is returned so downstream products stay finite.
        """
        k = np.asarray(direction, dtype=np.float64)
        axis = self.axis_vector
        e = axis - np.dot(axis, k) * k
        norm = np.linalg.norm(e)
        if norm < 1e-12:
            ref = np.array([1.0, 0.0, 0.0]) if abs(k[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            e = np.cross(k, ref)
            norm = np.linalg.norm(e)
        return e / norm


VERTICAL_DIPOLE = AntennaPattern(AntennaKind.HALF_WAVE_DIPOLE, (0.0, 0.0, 1.0))
ISOTROPIC = AntennaPattern(AntennaKind.ISOTROPIC, (0.0, 0.0, 1.0))


def dipole_gain(pattern: AntennaPattern, direction: NDArray[np.float64]) -> float:
    """Linear gain of ``pattern`` towards unit vector ``direction``.

    G(theta) = 1.643 * [cos(pi/2 cos theta) / sin theta]^2, theta measured from
    the dipole axis. Isotropic elements return 1.
    """
    d = np.asarray(direction, dtype=np.float64)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
        raise GeometryError("dipole_gain expects a unit direction")
    if pattern.kind is AntennaKind.ISOTROPIC:
        return 1.0

    cos_t = float(np.clip(np.dot(d, pattern.axis_vector), -1.0, 1.0))
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    if sin_t < 1e-12:
        return 0.0
    return DIPOLE_PEAK_GAIN * (math.cos(0.5 * math.pi * cos_t) / sin_t) ** 2


def knife_edge_loss(nu: float) -> float:
    """ITU-R P.526 single knife-edge loss J(nu) in dB; 0 dB below nu = -0.78."""
    if not math.isfinite(nu):
        raise GeometryError(f"Knife-edge parameter must be finite, got {nu}")
    if nu <= KNIFE_EDGE_NU_MIN:
        return 0.0
    return 6.9 + 20.0 * math.log10(math.sqrt((nu - 0.1) ** 2 + 1.0) + nu - 0.1)


def fresnel_kirchhoff_nu(h: float, d1: float, d2: float, wavelength_m: float) -> float:
    """Clearance parameter nu = h * sqrt(2 (d1 + d2) / (lambda d1 d2))."""
    if d1 <= 0 or d2 <= 0:
        raise GeometryError(f"Edge must lie between the terminals (d1={d1}, d2={d2})")
    return h * math.sqrt(2.0 * (d1 + d2) / (wavelength_m * d1 * d2))
