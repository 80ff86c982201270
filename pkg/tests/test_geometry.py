import math

import numpy as np
import pytest

from app.constants import CONSTANTS
from app.errors import ConfigurationError
from app.geometry import (
    HALF_SPACE_G,
    NVLayerModel,
    SampleVolumeShape,
    ac_zeeman_broadening,
    back_action_map,
    back_action_prefactor,
    back_action_stats,
    back_action_volume_mean,
    crossover_depth,
    detection_volume,
    diffusion_rate,
    duty_cycle_broadening,
    geometric_factor,
    hemisphere_volume,
    kappa_from_geometric_factor,
    mean_signal,
    min_thermal_volume,
    scaling_projection,
    statistical_noise_std,
    thermal_prefactor,
)

B0 = 0.0882


# ─── Thermal vs statistical polarization ───

def test_thermal_prefactor():
    assert thermal_prefactor(B0, 300.0, 6.6e28) == pytest.approx(56e-12, rel=0.01)
    assert thermal_prefactor(2 * B0) == pytest.approx(2 * thermal_prefactor(B0))


def test_min_thermal_volume():
    assert min_thermal_volume(B0) ** (1 / 3) == pytest.approx(8.717e-6, rel=2e-3)


def test_crossover_depth_balances_signal_and_noise():
    depth = crossover_depth(B0)
    assert 3e-6 <= depth <= 4e-6
    assert 1.5 * thermal_prefactor(B0) == pytest.approx(2.0 * statistical_noise_std(depth), rel=1e-9)


def test_statistical_noise_scaling():
    assert statistical_noise_std(1e-6) / statistical_noise_std(4e-6) == pytest.approx(8.0)
    with pytest.raises(ConfigurationError):
        statistical_noise_std(0.0)


def test_shapes_from_ratio():
    for kind in ("hemisphere", "cube", "box"):
        shape = SampleVolumeShape.from_ratio(kind, 20.0, nv_depth=2e-6, aspect=0.5)
        assert shape.ratio == pytest.approx(20.0)
    with pytest.raises(ConfigurationError):
        SampleVolumeShape("sphere", 1e-6, 1e-6)


def test_mean_signal_large_hemisphere():
    shape = SampleVolumeShape.from_ratio("hemisphere", 50.0)
    assert 79e-12 <= mean_signal(B0, 300.0, 6.6e28, shape) <= 81e-12


def test_geometric_factor_approaches_half_space():
    small = geometric_factor(SampleVolumeShape.from_ratio("hemisphere", 5.0))
    large = geometric_factor(SampleVolumeShape.from_ratio("hemisphere", 50.0))
    assert 0 < small < large < HALF_SPACE_G
    cube = geometric_factor(SampleVolumeShape.from_ratio("cube", 50.0))
    assert 0 < cube < HALF_SPACE_G


def test_perpendicular_component_vanishes():
    shape = SampleVolumeShape.from_ratio("hemisphere", 10.0)
    assert abs(geometric_factor(shape, component="q2")) < 1e-9


def test_kappa_gives_half_of_asymptote():
    kappa = kappa_from_geometric_factor()
    assert 2.0 <= kappa <= 3.0
    g = geometric_factor(SampleVolumeShape.from_ratio("hemisphere", kappa))
    assert g == pytest.approx(0.5 * HALF_SPACE_G, rel=1e-2)


def test_detection_volume():
    assert detection_volume(1e-6, 2.4) == pytest.approx(hemisphere_volume(2.4e-6))
    assert hemisphere_volume(1.0) == pytest.approx(2 * math.pi / 3)


def test_detection_volume_with_recomputed_kappa():
    fixed = detection_volume(1e-6)
    recomputed = detection_volume(1e-6, kappa_from_geometric_factor())
    assert 0.5 * fixed <= recomputed <= 2.0 * fixed


def test_geometric_factor_depends_only_on_volume_over_depth_cubed():
    for kind in ("hemisphere", "cube"):
        near = SampleVolumeShape(kind, 10e-6, 1e-6)
        far = SampleVolumeShape(kind, 20e-6, 2e-6)
        assert far.volume == pytest.approx(8 * near.volume)
        assert geometric_factor(far) == pytest.approx(geometric_factor(near), rel=1e-9)


# ─── Back-action ───

def test_back_action_prefactor():
    assert back_action_prefactor(0.8e23) == pytest.approx(37.096e-9, rel=1e-3)


def test_back_action_map_is_converged_and_bipolar():
    bmap = back_action_map(NVLayerModel(), 2e-6, extent=25e-6, resolution=32)
    assert bmap.factor.shape == (32, 32)
    assert bmap.levels >= 2
    assert bmap.change < 1e-3
    stats = back_action_stats(bmap)
    assert stats.min < 0 < stats.max
    assert stats.spread == pytest.approx(0.5 * (stats.max - stats.min))


def test_back_action_map_extrema_two_microns_above_the_layer():
    stats = back_action_stats(back_action_map(NVLayerModel(), 2e-6, extent=25e-6, resolution=64))
    assert stats.max == pytest.approx(1.667, rel=0.03)
    assert stats.min == pytest.approx(-0.986, rel=0.03)


def test_back_action_map_fades_far_from_the_layer():
    peaks = [
        float(np.max(np.abs(back_action_map(NVLayerModel(), z, extent=25e-6, resolution=16).factor)))
        for z in (2e-6, 10e-6, 50e-6)
    ]
    assert peaks[0] > peaks[1] > peaks[2]
    assert peaks[2] < 0.05


def test_back_action_map_rejects_bad_grid():
    with pytest.raises(ConfigurationError):
        back_action_map(NVLayerModel(), 2e-6, resolution=31)
    with pytest.raises(ConfigurationError):
        back_action_map(NVLayerModel(), 0.0)


def test_back_action_volume_mean_is_small():
    stats = back_action_volume_mean(NVLayerModel(), radius=25e-6, n_planes=8, resolution=32)
    assert abs(stats.mean) < 0.1
    assert stats.mean_abs < 0.5


def test_duty_cycle_broadening():
    bmap = back_action_map(NVLayerModel(), 2e-6, extent=25e-6, resolution=32)
    stats = back_action_stats(bmap)
    prefactor = back_action_prefactor(0.8e23)
    full = duty_cycle_broadening(stats, 1.0, prefactor)
    assert duty_cycle_broadening(stats, 0.5, prefactor) == pytest.approx(0.5 * full)
    assert full == pytest.approx(stats.spread * prefactor * CONSTANTS.gamma_p_freq)
    with pytest.raises(ConfigurationError):
        duty_cycle_broadening(stats, 1.5, prefactor)


# ─── Calculators ───

def test_ac_zeeman():
    assert ac_zeeman_broadening(15e6, 400e6) == pytest.approx(1.2988, rel=1e-3)
    with pytest.raises(ConfigurationError):
        ac_zeeman_broadening(15e6, 0.0)


def test_diffusion_rate():
    assert diffusion_rate(2e-9, (5e-9) ** 3) == pytest.approx(150e6, rel=0.05)
    assert diffusion_rate(0.3e-9, (5e-9) ** 3) == pytest.approx(22.9e6, rel=0.01)
    assert diffusion_rate(2e-9, 8 * (5e-9) ** 3) == pytest.approx(diffusion_rate(2e-9, (5e-9) ** 3) / 4)


def test_scaling_projection():
    ensemble = scaling_projection(1.0, 50e-12, 1e-9, 600.0)
    assert 0.6 <= ensemble["min_concentration_molar"] <= 2.4
    improved = scaling_projection(1.0, 2e-12, 1e-9, 600.0)
    assert 0.025 <= improved["min_concentration_molar"] <= 0.1
    longer = scaling_projection(1.0, 2e-12, 1e-9, 2400.0)
    assert longer["min_concentration_molar"] == pytest.approx(0.5 * improved["min_concentration_molar"])
    assert improved["spins_per_rthz"] > 0
    with pytest.raises(ConfigurationError):
        scaling_projection(1.0, 0.0, 1e-9, 600.0)


def test_map_grid_coordinates():
    bmap = back_action_map(NVLayerModel(), 5e-6, extent=10e-6, resolution=16)
    np.testing.assert_allclose(bmap.x, np.linspace(-10e-6, 10e-6, 16))
    assert bmap.z == 5e-6
