"""Path amplitudes, delays, angles, aggregates and MIMO synthesis."""

import json
import math

import numpy as np
import pytest

from mmwave_uav_sim.channel import (
    AntennaPair,
    ArrayDescriptor,
    PathMetrics,
    amplitude_to_dbm,
    check_energy,
    compute_metrics,
    direction_from_angles,
    mean_delay,
    path_amplitude,
    path_angles,
    path_delay,
    rms_delay_spread,
    synthesize_mimo,
    total_power,
)
from mmwave_uav_sim.electromagnetics import ISOTROPIC, Material, knife_edge_loss, reflection_power, wavelength
from mmwave_uav_sim.errors import ChannelError, ConfigError, EnergyBoundError, GeometryError
from mmwave_uav_sim.raytracer import Interaction, InteractionKind, RayPath, TraceConfig

ISO = AntennaPair(tx=ISOTROPIC, rx=ISOTROPIC)
CFG = TraceConfig()
LAM = wavelength(60e9)
PEC = {"pec": Material(name="pec", is_pec=True, scattering_s=0.0)}


def los_path(length: float = 100.0) -> RayPath:
    return RayPath(vertices=np.array([[0.0, 0.0, 5.0], [length, 0.0, 5.0]]))


def ground_bounce(material: str = "pec") -> RayPath:
    hit = Interaction(
        kind=InteractionKind.REFLECTION,
        point=np.array([5.0, 0.0, 0.0]),
        face_id=0,
        material_id=material,
        normal=np.array([0.0, 0.0, 1.0]),
    )
    return RayPath(vertices=np.array([[0.0, 0.0, 5.0], [5.0, 0.0, 0.0], [10.0, 0.0, 5.0]]), interactions=(hit,))


def metrics(amplitude: complex, delay: float) -> PathMetrics:
    return PathMetrics(
        power=amplitude_to_dbm(amplitude, 0.0),
        amplitude=amplitude,
        delay=delay,
        aod_az=0.0,
        aod_el=0.0,
        aoa_az=180.0,
        aoa_el=0.0,
        los=False,
    )


def test_free_space_los_power():
    iso = compute_metrics(los_path(), {}, ISO, CFG)
    assert iso.power == pytest.approx(-108.0, abs=0.02)
    assert iso.los
    dipoles = compute_metrics(los_path(), {})
    assert dipoles.power == pytest.approx(-103.7, abs=0.02)
    assert dipoles.power - iso.power == pytest.approx(20.0 * math.log10(1.643))


def test_los_delay_and_phase():
    path = los_path()
    assert path_delay(path) == pytest.approx(333.564, abs=1e-3)
    a = path_amplitude(path, {}, ISO, CFG)
    expected = LAM / (4.0 * math.pi * 100.0) * np.exp(-2j * math.pi * 100.0 / LAM)
    assert a == pytest.approx(expected, rel=1e-9)


def test_pec_ground_bounce():
    """Vertical polarization off a PEC ground keeps full magnitude."""
    path = ground_bounce()
    a = path_amplitude(path, PEC, ISO, CFG)
    assert abs(a) == pytest.approx(LAM / (4.0 * math.pi * math.sqrt(200.0)), rel=1e-9)
    assert path_delay(path) == pytest.approx(47.17, abs=0.01)


def test_ground_bounce_angles():
    aod_az, aod_el, aoa_az, aoa_el = path_angles(ground_bounce())
    assert aod_az == pytest.approx(0.0)
    assert aod_el == pytest.approx(-45.0)
    assert aoa_az == pytest.approx(180.0)
    assert aoa_el == pytest.approx(-45.0)


def test_azimuth_just_below_east_wraps_to_zero():
    """atan2 gives -4e-10 deg here; 359.9999999996 would print as 360 at 9 digits."""
    tiny = math.radians(4e-10)
    path = RayPath(vertices=np.array([[0.0, 0.0, 5.0], [1000.0, -1000.0 * math.tan(tiny), 5.0]]))
    aod_az, _, aoa_az, _ = path_angles(path)
    assert aod_az == 0.0
    assert aoa_az == pytest.approx(180.0)

    slightly_south = RayPath(vertices=np.array([[0.0, 0.0, 5.0], [1000.0, -1.0, 5.0]]))
    assert path_angles(slightly_south)[0] == pytest.approx(360.0 + math.degrees(math.atan2(-1.0, 1000.0)))
    assert path_angles(slightly_south)[0] < 360.0


def test_concrete_bounce_is_weaker_than_pec(materials):
    pec = abs(path_amplitude(ground_bounce(), PEC, ISO, CFG))
    concrete = abs(path_amplitude(ground_bounce("concrete"), materials, ISO, CFG))
    assert 0.0 < concrete < pec


def test_unknown_material_is_rejected():
    with pytest.raises(GeometryError, match="unknown material"):
        path_amplitude(ground_bounce("glass"), PEC, ISO, CFG)


def test_diffraction_scales_by_knife_edge_loss():
    edge = Interaction(kind=InteractionKind.DIFFRACTION, point=np.array([50.0, 0.0, 5.0]), edge_id=0, nu=0.0)
    path = RayPath(
        vertices=np.array([[0.0, 0.0, 5.0], [50.0, 0.0, 5.0], [100.0, 0.0, 5.0]]), interactions=(edge,)
    )
    drop = amplitude_to_dbm(path_amplitude(path, {}, ISO, CFG), 0.0) - amplitude_to_dbm(
        path_amplitude(los_path(), {}, ISO, CFG), 0.0
    )
    assert drop == pytest.approx(-knife_edge_loss(0.0), abs=1e-9)


def test_diffuse_amplitude_follows_lambertian_form(concrete):
    tx, c, rx = np.array([0.0, -1.0, 5.0]), np.array([5.0, 0.0, 5.0]), np.array([0.0, 1.0, 5.0])
    hit = Interaction(
        kind=InteractionKind.SCATTERING,
        point=c,
        face_id=0,
        material_id="concrete",
        normal=np.array([1.0, 0.0, 0.0]),
        area=1.0,
    )
    path = RayPath(vertices=np.array([tx, c, rx]), interactions=(hit,))
    r = math.sqrt(26.0)
    cos = 5.0 / r
    expected = (
        LAM**2 * 0.4**2 * reflection_power(concrete, cos, 60e9) * cos * cos / (16.0 * math.pi**3 * r**4)
    )
    a = path_amplitude(path, {"concrete": concrete}, ISO, CFG)
    assert abs(a) ** 2 == pytest.approx(expected, rel=1e-9)


def test_energy_bound():
    check_energy(complex(1.0, 0.0), 0.0)
    check_energy(complex(-1.0, 0.0), 0.4)
    with pytest.raises(EnergyBoundError):
        check_energy(complex(1.1, 0.0), 0.4)


def test_total_power_modes():
    a = 1e-5 + 0j
    single = total_power([a])
    assert total_power([a, a], "coherent") - single == pytest.approx(20.0 * math.log10(2.0))
    assert total_power([a, a], "noncoherent") - single == pytest.approx(10.0 * math.log10(2.0))
    assert total_power([a, -a], "coherent") is None
    assert total_power([]) is None
    assert total_power([a], tx_power=10.0) == pytest.approx(single + 10.0)
    with pytest.raises(ValueError):
        total_power([a], "average")


def test_delay_statistics():
    paths = [metrics(1.0, 10.0), metrics(1.0, 20.0)]
    assert mean_delay(paths) == pytest.approx(15.0)
    assert rms_delay_spread(paths) == pytest.approx(5.0)
    assert rms_delay_spread([metrics(1.0, 10.0)]) == pytest.approx(0.0)
    assert mean_delay([]) is None
    assert rms_delay_spread([]) is None


def test_amplitude_to_dbm_of_zero():
    assert amplitude_to_dbm(0j, 0.0) == -math.inf


def test_direction_from_angles():
    np.testing.assert_allclose(direction_from_angles(90.0, 0.0), [0.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(direction_from_angles(0.0, 90.0), [0.0, 0.0, 1.0], atol=1e-12)


def test_mimo_single_broadside_path_is_rank_one():
    array = ArrayDescriptor.uniform_linear(2, 0.5, (0.0, 1.0, 0.0))
    channel = synthesize_mimo([metrics(0.5 + 0.5j, 10.0)], array, array)
    assert channel.matrix.shape == (2, 2)
    np.testing.assert_allclose(channel.matrix, np.full((2, 2), 0.5 + 0.5j), atol=1e-12)
    assert channel.rank == 1


def test_mimo_two_separated_paths_are_rank_two():
    array = ArrayDescriptor.uniform_linear(2, 0.5, (0.0, 1.0, 0.0))
    endfire = PathMetrics(
        power=0.0, amplitude=1.0, delay=1.0, aod_az=90.0, aod_el=0.0, aoa_az=90.0, aoa_el=0.0, los=False
    )
    broadside = PathMetrics(
        power=0.0, amplitude=1.0, delay=1.0, aod_az=0.0, aod_el=0.0, aoa_az=0.0, aoa_el=0.0, los=True
    )
    channel = synthesize_mimo([broadside, endfire], array, array)
    np.testing.assert_allclose(channel.matrix, 2.0 * np.eye(2), atol=1e-12)
    assert channel.rank == 2


def test_mimo_empty_path_set():
    array = ArrayDescriptor.uniform_linear(1)
    with pytest.raises(ChannelError):
        synthesize_mimo([], array, array)


def test_array_descriptor_io(tmp_path):
    path = tmp_path / "array.json"
    path.write_text(json.dumps({"elements": [[0, 0, 0], [0, 0.5, 0]]}))
    array = ArrayDescriptor.load(path)
    assert len(array) == 2
    with pytest.raises(ConfigError):
        ArrayDescriptor.from_dict({"elements": [[0, 0, 0]], "spacing": 0.5})
    with pytest.raises(ConfigError):
        ArrayDescriptor.from_dict({"elements": []})
    with pytest.raises(ConfigError):
        ArrayDescriptor.load(tmp_path / "missing.json")

    channel = synthesize_mimo([metrics(1.0, 1.0)], array, ArrayDescriptor.uniform_linear(1))
    doc = channel.to_dict()
    assert set(doc) == {"f", "real", "imag", "tx_elements", "rx_elements"}
    assert len(doc["real"]) == 1 and len(doc["real"][0]) == 2
