"""Per-path channel quantities and narrowband MIMO synthesis.

Amplitudes are complex voltage ratios referred to the transmit power, so a
path's received power is ``20 log10 |a| + tx_power`` dBm. Specular and
diffracted paths carry a polarization vector from the transmit dipole through
every interaction to the receive dipole. Diffuse paths are scalar: their power
comes from the Lambertian bistatic form and their phase from the geometric
length only.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from mmwave_uav_sim import canonical
from mmwave_uav_sim.electromagnetics import (
    C0,
    VERTICAL_DIPOLE,
    AntennaPattern,
    Material,
    dipole_gain,
    effective_reflection,
    energy_balance,
    fresnel,
    knife_edge_loss,
    reflection_power,
)
from mmwave_uav_sim.errors import ChannelError, ConfigError, EnergyBoundError, GeometryError
from mmwave_uav_sim.raytracer import InteractionKind, RayPath, TraceConfig

ENERGY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class AntennaPair:
    tx: AntennaPattern = VERTICAL_DIPOLE
    rx: AntennaPattern = VERTICAL_DIPOLE


@dataclass(frozen=True)
class PathMetrics:
    power: float  # dBm
    amplitude: complex
    delay: float  # ns
    aod_az: float  # degrees
    aod_el: float
    aoa_az: float
    aoa_el: float
    los: bool

    @property
    def linear_power(self) -> float:
        return abs(self.amplitude) ** 2


@dataclass(frozen=True, eq=False)
class ChannelRay:
    path: RayPath
    metrics: PathMetrics


def check_energy(gamma: complex, scattering_s: float, where: str = "") -> None:
    """Raise when |G_eff|^2 + S^2 |G|^2 exceeds one."""
    total = energy_balance(gamma, scattering_s)
    if total > 1.0 + ENERGY_TOLERANCE:
        raise EnergyBoundError(
            f"Interaction{' ' + where if where else ''} creates energy: "
            f"|G_eff|^2 + S^2|G|^2 = {total:.15g} (G={gamma}, S={scattering_s})"
        )


def _segment_dirs(path: RayPath) -> NDArray[np.float64]:
    seg = np.diff(path.vertices, axis=0)
    return seg / np.linalg.norm(seg, axis=1, keepdims=True)


def _te_direction(k_in: NDArray[np.float64], normal: NDArray[np.float64]) -> NDArray[np.float64]:
    s = np.cross(k_in, normal)
    norm = np.linalg.norm(s)
    if norm < 1e-12:
        # Normal incidence: any in-plane direction is a valid TE reference
        ref = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        s = np.cross(ref, normal)
        norm = np.linalg.norm(s)
    return s / norm


def _material(materials: Mapping[str, Material], material_id: Optional[str]) -> Material:
    if material_id is None or material_id not in materials:
        raise GeometryError(f"Interaction references unknown material '{material_id}'")
    return materials[material_id]


def _vector_amplitude(
    path: RayPath, materials: Mapping[str, Material], antennas: AntennaPair, cfg: TraceConfig
) -> complex:
    dirs = _segment_dirs(path)
    field = antennas.tx.polarization(dirs[0]).astype(np.complex128)
    for j, hit in enumerate(path.interactions):
        k_in, k_out = dirs[j], dirs[j + 1]
        if hit.kind is InteractionKind.REFLECTION:
            material = _material(materials, hit.material_id)
            n = np.asarray(hit.normal, dtype=np.float64)
            cos_i = min(abs(float(k_in @ n)), 1.0)
            gamma_te, gamma_tm = fresnel(material, cos_i, cfg.f)
            s = material.scattering_s
            check_energy(gamma_te, s, f"on face {hit.face_id}")
            check_energy(gamma_tm, s, f"on face {hit.face_id}")
            te = _te_direction(k_in, n)
            k_r = k_in - 2.0 * float(k_in @ n) * n
            p_in = np.cross(te, k_in)
            p_out = np.cross(te, k_r)
            field = (
                effective_reflection(gamma_te, s) * (field @ te) * te
                + effective_reflection(gamma_tm, s) * (field @ p_in) * p_out
            )
        elif hit.kind is InteractionKind.DIFFRACTION:
            loss = 10.0 ** (-knife_edge_loss(float(hit.nu or 0.0)) / 20.0)
            magnitude = float(np.linalg.norm(field)) * loss
            # Keep the field transverse to the new direction, magnitude scaled by the loss
            transverse = field - (field @ k_out) * k_out
            t_norm = float(np.linalg.norm(transverse))
            field = transverse * (magnitude / t_norm) if t_norm > 1e-15 else field * loss
        else:
            raise GeometryError(f"Unexpected interaction {hit.kind} on a vector path")

    projection = complex(field @ antennas.rx.polarization(dirs[-1]))
    lam = cfg.wavelength
    d = path.length
    gain = math.sqrt(
        dipole_gain(antennas.tx, path.departure_dir) * dipole_gain(antennas.rx, -path.arrival_dir)
    )
    return gain * lam / (4.0 * math.pi * d) * np.exp(-2j * math.pi * d / lam) * projection


def _scalar_amplitude(
    path: RayPath, materials: Mapping[str, Material], antennas: AntennaPair, cfg: TraceConfig
) -> complex:
    """Lambertian bistatic power P/Pt, phase from the geometric length."""
    dirs = _segment_dirs(path)
    seg_len = path.segment_lengths
    lam = cfg.wavelength
    ratio = dipole_gain(antennas.tx, path.departure_dir) * dipole_gain(antennas.rx, -path.arrival_dir)

    scatter = [j for j, hit in enumerate(path.interactions) if hit.kind is InteractionKind.SCATTERING]
    if len(scatter) != 1:
        raise GeometryError(f"Diffuse path needs exactly one S interaction, got {len(scatter)}")
    k = scatter[0]

    for j, hit in enumerate(path.interactions):
        k_in, k_out = dirs[j], dirs[j + 1]
        material = _material(materials, hit.material_id) if hit.material_id else None
        if hit.kind is InteractionKind.SCATTERING:
            assert material is not None
            n = np.asarray(hit.normal, dtype=np.float64)
            cos_i = min(abs(float(k_in @ n)), 1.0)
            cos_s = min(abs(float(k_out @ n)), 1.0)
            s = material.scattering_s
            gamma2 = reflection_power(material, cos_i, cfg.f)
            check_energy(complex(math.sqrt(gamma2)), s, f"on face {hit.face_id}")
            ri = float(seg_len[: k + 1].sum())
            rs = float(seg_len[k + 1 :].sum())
            area = float(hit.area or 0.0)
            ratio *= (
                lam**2 * s**2 * gamma2 * area * cos_i * cos_s / (16.0 * math.pi**3 * ri**2 * rs**2)
            )
        elif hit.kind is InteractionKind.REFLECTION:
            assert material is not None
            n = np.asarray(hit.normal, dtype=np.float64)
            cos_i = min(abs(float(k_in @ n)), 1.0)
            gamma_te, gamma_tm = fresnel(material, cos_i, cfg.f)
            s = material.scattering_s
            check_energy(gamma_te, s, f"on face {hit.face_id}")
            check_energy(gamma_tm, s, f"on face {hit.face_id}")
            ratio *= 0.5 * (
                abs(effective_reflection(gamma_te, s)) ** 2 + abs(effective_reflection(gamma_tm, s)) ** 2
            )
        else:
            ratio *= 10.0 ** (-knife_edge_loss(float(hit.nu or 0.0)) / 10.0)

    return math.sqrt(ratio) * np.exp(-2j * math.pi * path.length / lam)


def path_amplitude(
    path: RayPath,
    materials: Mapping[str, Material],
    antennas: AntennaPair = AntennaPair(),
    cfg: TraceConfig = TraceConfig(),
) -> complex:
    """Complex amplitude of one path relative to the transmitted field.

    Raises:
        GeometryError: zero-length path or unknown interaction material.
        EnergyBoundError: an interaction would create energy.
    """
    if not path.length > 0:
        raise GeometryError("Zero-length path")
    if any(hit.kind is InteractionKind.SCATTERING for hit in path.interactions):
        return complex(_scalar_amplitude(path, materials, antennas, cfg))
    return complex(_vector_amplitude(path, materials, antennas, cfg))


def path_delay(path: RayPath) -> float:
    """Propagation delay in ns."""
    if not path.length > 0:
        raise GeometryError("Degenerate path has no delay")
    return path.length / C0 * 1e9


def _azimuth_elevation(direction: NDArray[np.float64]) -> tuple[float, float]:
    x, y, z = (float(c) for c in direction)
    az = math.degrees(math.atan2(y, x)) % 360.0
    # Stays in [0, 360) after rounding to the stored precision
    if canonical.round_sig(az) >= 360.0:
        az = 0.0
    el = math.degrees(math.asin(max(-1.0, min(1.0, z))))
    return az + 0.0, el + 0.0


def path_angles(path: RayPath) -> tuple[float, float, float, float]:
    """(aod_az, aod_el, aoa_az, aoa_el) in degrees.

    Azimuth counter-clockwise from +x in [0, 360); elevation from the
    horizontal plane. The arrival angle points from the receiver back along
    the incoming wave.
    """
    aod_az, aod_el = _azimuth_elevation(path.departure_dir)
    aoa_az, aoa_el = _azimuth_elevation(-path.arrival_dir)
    return aod_az, aod_el, aoa_az, aoa_el


def amplitude_to_dbm(amplitude: complex, tx_power: float) -> float:
    magnitude = abs(amplitude)
    if magnitude == 0.0:
        return -math.inf
    return 20.0 * math.log10(magnitude) + tx_power


def compute_metrics(
    path: RayPath,
    materials: Mapping[str, Material],
    antennas: AntennaPair = AntennaPair(),
    cfg: TraceConfig = TraceConfig(),
) -> PathMetrics:
    amplitude = path_amplitude(path, materials, antennas, cfg)
    aod_az, aod_el, aoa_az, aoa_el = path_angles(path)
    return PathMetrics(
        power=amplitude_to_dbm(amplitude, cfg.tx_power),
        amplitude=amplitude,
        delay=path_delay(path),
        aod_az=aod_az,
        aod_el=aod_el,
        aoa_az=aoa_az,
        aoa_el=aoa_el,
        los=path.is_los,
    )


def total_power(
    amplitudes: Sequence[complex], mode: str = "coherent", tx_power: float = 0.0
) -> Optional[float]:
    """Aggregate received power in dBm, or None (outage) for an empty set.

    ``coherent`` sums complex amplitudes; ``noncoherent`` sums powers.
    """
    if mode not in ("coherent", "noncoherent"):
        raise ValueError(f"Unknown aggregation mode '{mode}'")
    if not len(amplitudes):
        return None
    a = np.asarray(amplitudes, dtype=np.complex128)
    if mode == "coherent":
        linear = float(abs(a.sum()) ** 2)
    else:
        linear = float(np.sum(np.abs(a) ** 2))
    if linear == 0.0:
        return None
    return 10.0 * math.log10(linear) + tx_power


def mean_delay(metrics: Sequence[PathMetrics]) -> Optional[float]:
    """Power-weighted mean delay in ns."""
    weights = np.array([m.linear_power for m in metrics])
    if not len(weights) or weights.sum() == 0.0:
        return None
    delays = np.array([m.delay for m in metrics])
    return float(np.sum(weights * delays) / weights.sum())


def rms_delay_spread(metrics: Sequence[PathMetrics]) -> Optional[float]:
    """Power-weighted RMS delay spread in ns."""
    mu = mean_delay(metrics)
    if mu is None:
        return None
    weights = np.array([m.linear_power for m in metrics])
    delays = np.array([m.delay for m in metrics])
    return float(math.sqrt(max(0.0, np.sum(weights * (delays - mu) ** 2) / weights.sum())))


# ----------------------------------------------------------------------------
# MIMO
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ArrayDescriptor:
    """Antenna element positions in wavelengths."""

    elements: NDArray[np.float64]

    def __post_init__(self) -> None:
        elements = np.asarray(self.elements, dtype=np.float64)
        if elements.ndim != 2 or elements.shape[1] != 3 or len(elements) < 1:
            raise ConfigError(f"Array needs a non-empty list of [x, y, z] elements, got shape {elements.shape}")
        if not np.all(np.isfinite(elements)):
            raise ConfigError("Array element positions must be finite")
        object.__setattr__(self, "elements", elements)

    def __len__(self) -> int:
        return len(self.elements)

    @classmethod
    def uniform_linear(
        cls, n: int, spacing: float = 0.5, axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    ) -> "ArrayDescriptor":
        return cls(np.outer(np.arange(n) * spacing, np.asarray(axis, dtype=np.float64)))

    @classmethod
    def from_dict(cls, data: object) -> "ArrayDescriptor":
        if not isinstance(data, dict) or set(data) != {"elements"}:
            raise ConfigError("Array descriptor must be an object with only an 'elements' key")
        return cls(np.asarray(data["elements"], dtype=np.float64))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ArrayDescriptor":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: cannot read array descriptor ({e})") from e
        return cls.from_dict(data)

    def steering(self, direction: NDArray[np.float64]) -> NDArray[np.complex128]:
        """Planar-wavefront response exp(j 2 pi <p_n, u>)."""
        return np.exp(2j * math.pi * (self.elements @ np.asarray(direction, dtype=np.float64)))


@dataclass(frozen=True, eq=False)
class MimoChannel:
    matrix: NDArray[np.complex128]  # (Nr, Nt)
    f: float
    tx_array: ArrayDescriptor
    rx_array: ArrayDescriptor

    @property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.matrix))

    def to_dict(self) -> dict:
        return {
            "f": self.f,
            "real": self.matrix.real.tolist(),
            "imag": self.matrix.imag.tolist(),
            "tx_elements": self.tx_array.elements.tolist(),
            "rx_elements": self.rx_array.elements.tolist(),
        }


def direction_from_angles(az_deg: float, el_deg: float) -> NDArray[np.float64]:
    az, el = math.radians(az_deg), math.radians(el_deg)
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


def synthesize_mimo(
    metrics: Sequence[PathMetrics],
    tx_array: ArrayDescriptor,
    rx_array: ArrayDescriptor,
    f: float = TraceConfig().f,
) -> MimoChannel:
    """H = sum_k a_k v_rx(AoA_k) v_tx(AoD_k)^H.

    Raises:
        ChannelError: no paths.
    """
    if not metrics:
        raise ChannelError("Cannot synthesize a MIMO channel from an empty path set")
    h = np.zeros((len(rx_array), len(tx_array)), dtype=np.complex128)
    for m in metrics:
        v_tx = tx_array.steering(direction_from_angles(m.aod_az, m.aod_el))
        v_rx = rx_array.steering(direction_from_angles(m.aoa_az, m.aoa_el))
        h += m.amplitude * np.outer(v_rx, v_tx.conj())
    return MimoChannel(matrix=h, f=f, tx_array=tx_array, rx_array=rx_array)
