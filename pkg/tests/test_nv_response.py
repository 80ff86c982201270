import math

import numpy as np
import pytest

from app.errors import ConfigurationError
from app.nv_response import (
    PulseSequenceSpec,
    filter_response,
    phase_slope,
    pulse_on_fraction,
    readout,
    readout_noise_std,
    sensitivity_estimate,
    sensor_preset,
    toggling_phase,
    two_pi_field,
)

F0 = 3.742e6


def test_two_pi_field_value():
    assert two_pi_field(F0, 48) == pytest.approx(8.737e-6, rel=1e-3)


def test_resonant_two_pi_field_accumulates_two_pi():
    seq = PulseSequenceSpec.for_frequency("XY8", 6, F0, 16.6e6)
    amplitude = two_pi_field(F0, seq.n_pulses)
    phase = toggling_phase(lambda t: amplitude * np.cos(2 * np.pi * F0 * t), seq)
    assert phase == pytest.approx(2 * np.pi, rel=5e-3)


def test_phase_slope_matches_toggling_integral(ensemble_sensor):
    seq = PulseSequenceSpec.for_frequency("XY8", 6, F0, 16.6e6)
    amplitude = 1e-8
    phase = toggling_phase(lambda t: amplitude * np.cos(2 * np.pi * F0 * t), seq)
    assert phase_slope(ensemble_sensor, seq) * amplitude == pytest.approx(phase, rel=1e-6)


def test_filter_rejects_detuned_fields():
    seq = PulseSequenceSpec.for_frequency("XY8", 6, F0, 16.6e6)
    on = abs(filter_response(seq, F0))
    off = abs(filter_response(seq, F0 + 500e3))
    assert off / on < 0.1


def test_sequence_shapes():
    xy8 = PulseSequenceSpec.for_frequency("XY8", 6, F0, 16.6e6)
    cpmg = PulseSequenceSpec.for_frequency("CPMG", 10, F0, 16.6e6)
    assert xy8.n_pulses == 48
    assert cpmg.n_pulses == 10
    assert xy8.duration == pytest.approx(48 / (2 * F0))
    edges, signs = xy8.segments()
    assert len(edges) == xy8.n_pulses + 2
    assert signs[0] == 1.0 and signs[1] == -1.0


def test_pulse_spacing_must_exceed_pi_duration():
    with pytest.raises(ConfigurationError):
        PulseSequenceSpec.for_frequency("XY8", 1, F0, 1e6)
    with pytest.raises(ConfigurationError):
        PulseSequenceSpec("XY16", 1, 1e-7, 16.6e6)


def test_pulse_on_fraction():
    seq = PulseSequenceSpec.for_frequency("XY8", 6, F0, 16.6e6)
    expected = (48 * seq.pi_duration + 2 * seq.pi_half_duration) / 24e-6
    assert pulse_on_fraction(seq, 24e-6) == pytest.approx(expected)


def test_readout_means(ensemble_sensor):
    n = 20000
    plus = readout(np.zeros(n), ensemble_sensor, 1, seed=1)
    bright = readout(np.full(n, -np.pi / 2), ensemble_sensor, 1, seed=2)
    assert plus.mean() == pytest.approx(1 - 0.5 * ensemble_sensor.contrast, rel=1e-4)
    assert bright.mean() == pytest.approx(1.0, rel=1e-4)


def test_single_nv_readout_is_poisson():
    sensor = sensor_preset("paper-single-nv")
    samples = readout(np.zeros(50000), sensor, 1, seed=4)
    counts = samples * sensor.photons_per_readout
    np.testing.assert_allclose(counts, np.round(counts), atol=1e-9)
    assert counts.mean() == pytest.approx(sensor.photons_per_readout * (1 - 0.5 * sensor.contrast), rel=0.1)


def test_readout_is_seeded(ensemble_sensor):
    a = readout(np.zeros(10), ensemble_sensor, 1, seed=9)
    b = readout(np.zeros(10), ensemble_sensor, 1, seed=9)
    np.testing.assert_array_equal(a, b)


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        sensor_preset("bogus")


def test_ensemble_preset_sensitivity(ensemble_sensor):
    seq = PulseSequenceSpec.for_frequency("XY8", 6, 3.74065e6, 16.6e6)
    eta = sensitivity_estimate(ensemble_sensor, 24.06e-6, seq)
    assert 37.5e-12 <= eta <= 62.5e-12


def test_sensitivity_scales_with_photons(ensemble_sensor):
    from dataclasses import replace

    seq = PulseSequenceSpec.for_frequency("XY8", 6, 3.74065e6, 16.6e6)
    base = sensitivity_estimate(ensemble_sensor, 24.06e-6, seq)
    brighter = sensitivity_estimate(replace(ensemble_sensor, photons_per_readout=4 * 6e7), 24.06e-6, seq)
    assert base / brighter == pytest.approx(2.0)
    assert math.isfinite(base)


def test_readout_noise_std_matches_samples():
    sensor = sensor_preset("paper-ensemble")
    samples = readout(np.zeros(200_000), sensor, seed=4)
    assert np.std(samples) == pytest.approx(readout_noise_std(sensor), rel=0.02)
