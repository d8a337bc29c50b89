"""Materials, Fresnel coefficients, antenna patterns and knife-edge loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from mmwave_uav_sim.electromagnetics import (
    ISOTROPIC,
    VERTICAL_DIPOLE,
    AntennaKind,
    AntennaPattern,
    Material,
    dipole_gain,
    effective_reflection,
    energy_balance,
    fresnel,
    fresnel_kirchhoff_nu,
    itu_material,
    knife_edge_loss,
    reflection_power,
    reflection_power_batch,
    wavelength,
)
from mmwave_uav_sim.errors import GeometryError, MaterialError

F = 60e9


def test_wavelength_at_60ghz():
    assert wavelength(F) == pytest.approx(4.99654e-3, rel=1e-5)
    with pytest.raises(MaterialError):
        wavelength(0.0)


def test_itu_concrete_parameters(concrete):
    assert concrete.eps_real == pytest.approx(5.31)
    assert concrete.sigma == pytest.approx(0.0326 * 60**0.8095)
    assert concrete.scattering_s == pytest.approx(0.4)
    eta = concrete.complex_permittivity(F)
    assert eta.imag == pytest.approx(-0.2687, abs=1e-3)


def test_itu_material_errors():
    with pytest.raises(MaterialError, match="Unknown"):
        itu_material("unobtainium", F)
    # Brick is only modelled up to 10 GHz
    with pytest.raises(MaterialError, match="validity range"):
        itu_material("brick", F)


def test_metal_is_pec():
    metal = itu_material("metal", F)
    assert metal.is_pec
    assert metal.scattering_s == pytest.approx(0.2)
    assert fresnel(metal, 0.3, F) == (complex(-1.0, 0.0), complex(1.0, 0.0))


def test_concrete_normal_incidence(concrete):
    """|Gamma|^2 at normal incidence on concrete is about -8.07 dB."""
    te, tm = fresnel(concrete, 1.0, F)
    assert abs(te) == pytest.approx(0.395, abs=2e-3)
    assert abs(tm) == pytest.approx(abs(te), rel=1e-12)
    assert te.real < 0
    assert 10 * math.log10(abs(te) ** 2) == pytest.approx(-8.07, abs=0.02)


def test_grazing_incidence_reflects_fully(concrete):
    te, tm = fresnel(concrete, 0.0, F)
    assert abs(te) == pytest.approx(1.0, abs=1e-9)
    assert abs(tm) == pytest.approx(1.0, abs=1e-9)


def test_fresnel_rejects_out_of_range_cosine(concrete):
    with pytest.raises(GeometryError):
        fresnel(concrete, 1.5, F)


@settings(max_examples=200, deadline=None)
@given(
    cos_i=st.floats(min_value=0.0, max_value=1.0),
    eps=st.floats(min_value=1.0, max_value=80.0),
    sigma=st.floats(min_value=0.0, max_value=50.0),
)
def test_fresnel_magnitudes_bounded(cos_i, eps, sigma):
    material = Material(name="m", eps_real=eps, sigma=sigma)
    te, tm = fresnel(material, cos_i, F)
    assert abs(te) <= 1.0 + 1e-9
    assert abs(tm) <= 1.0 + 1e-9


def test_reflection_power_batch_matches_scalar(concrete):
    cosines = np.linspace(0.0, 1.0, 17)
    batch = reflection_power_batch(concrete, cosines, F)
    expected = [reflection_power(concrete, float(c), F) for c in cosines]
    np.testing.assert_allclose(batch, expected, rtol=1e-12)


def test_energy_balance_is_conserved_at_unit_gamma():
    assert energy_balance(1.0, 0.4) == pytest.approx(1.0)
    assert abs(effective_reflection(1.0, 0.4)) == pytest.approx(math.sqrt(0.84))
    assert energy_balance(0.5, 0.0) == pytest.approx(0.25)


def test_material_validation():
    with pytest.raises(MaterialError):
        Material(name="bad", eps_real=0.5)
    with pytest.raises(MaterialError):
        Material(name="bad", scattering_s=1.0)
    with pytest.raises(MaterialError):
        Material(name="bad", sigma=-1.0)


def test_dipole_gain_values():
    assert dipole_gain(VERTICAL_DIPOLE, np.array([1.0, 0.0, 0.0])) == pytest.approx(1.643)
    d60 = np.array([math.sin(math.radians(60)), 0.0, math.cos(math.radians(60))])
    assert dipole_gain(VERTICAL_DIPOLE, d60) == pytest.approx(1.095, abs=1e-3)
    assert dipole_gain(VERTICAL_DIPOLE, np.array([0.0, 0.0, 1.0])) == 0.0
    assert dipole_gain(ISOTROPIC, np.array([0.0, 0.0, 1.0])) == 1.0


def test_dipole_pattern_integrates_to_4pi():
    theta = np.linspace(0.0, math.pi, 4001)
    gains = np.array(
        [dipole_gain(VERTICAL_DIPOLE, np.array([math.sin(t), 0.0, math.cos(t)])) for t in theta]
    )
    total = 2.0 * math.pi * trapezoid(gains * np.sin(theta), theta)
    assert total == pytest.approx(4.0 * math.pi, rel=5e-3)


def test_dipole_gain_needs_unit_direction():
    with pytest.raises(GeometryError):
        dipole_gain(VERTICAL_DIPOLE, np.array([2.0, 0.0, 0.0]))


def test_polarization_is_transverse():
    pattern = AntennaPattern(AntennaKind.HALF_WAVE_DIPOLE, (0.0, 0.0, 1.0))
    for direction in ([1.0, 0.0, 0.0], [0.6, 0.0, 0.8], [0.0, 0.0, 1.0]):
        k = np.array(direction)
        e = pattern.polarization(k)
        assert abs(float(e @ k)) < 1e-12
        assert float(np.linalg.norm(e)) == pytest.approx(1.0)


def test_antenna_axis_must_be_unit():
    with pytest.raises(GeometryError):
        AntennaPattern(AntennaKind.HALF_WAVE_DIPOLE, (0.0, 0.0, 2.0))


def test_knife_edge_reference_values():
    assert knife_edge_loss(0.0) == pytest.approx(6.03, abs=0.01)
    assert knife_edge_loss(2.4) == pytest.approx(20.54, abs=0.01)
    assert knife_edge_loss(-1.0) == 0.0
    assert knife_edge_loss(-0.78) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=-0.7, max_value=50.0), st.floats(min_value=1e-3, max_value=5.0))
def test_knife_edge_monotonic(nu, step):
    assert knife_edge_loss(nu + step) > knife_edge_loss(nu)


def test_knife_edge_rejects_nan():
    with pytest.raises(GeometryError):
        knife_edge_loss(float("nan"))


def test_fresnel_kirchhoff_nu():
    lam = wavelength(F)
    nu = fresnel_kirchhoff_nu(5.0, 10.0, 10.0, lam)
    assert nu == pytest.approx(5.0 * math.sqrt(2.0 * 20.0 / (lam * 100.0)))
    assert nu == pytest.approx(44.74, abs=0.01)
    with pytest.raises(GeometryError):
        fresnel_kirchhoff_nu(5.0, 0.0, 10.0, lam)
