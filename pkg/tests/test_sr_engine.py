from dataclasses import replace

import numpy as np
import pytest

from app.errors import ConfigurationError
from app.nv_response import PulseSequenceSpec, sensitivity_estimate, sensor_preset
from app.signal_model import ResidualModulation, SampleModel, SpectralLine
from app.spectral import periodogram, preprocess
from app.sr_engine import (
    PlanningError,
    SeriesMismatchError,
    average_runs,
    average_series,
    measure_noise_floor,
    nyquist_band,
    phase_record,
    plan_protocol,
    run_sr,
)

from conftest import CLOCK_PERIOD, F0


def _tone(protocol, offset, amplitude=1e-8):
    return SampleModel((SpectralLine(protocol.f0_grid + offset, amplitude),))


def _peak_frequency(series):
    spec = periodogram(preprocess(series, 0), zero_pad=4)
    return spec.frequencies[1 + int(np.argmax(spec.magnitudes[1:]))], 1.0 / spec.duration


# ─── Planning ───

def test_plan_snaps_to_clock_grid(protocol):
    assert protocol.period_ticks == 3208
    assert protocol.k == 90
    assert protocol.f0_grid == pytest.approx(3740648.3791, abs=1e-3)
    assert protocol.tau_sr == pytest.approx(24.06e-6, abs=1e-9)
    assert protocol.tau_ticks == 90 * 3208


def test_plan_long_cycle():
    seq = PulseSequenceSpec.for_frequency("XY8", 4, 3.7313e6, 16.6e6)
    protocol = plan_protocol(3.7313e6, 75e-6, CLOCK_PERIOD, seq, n_iterations=10)
    assert protocol.period_ticks == 3216
    assert protocol.k == 280
    assert protocol.tau_sr == pytest.approx(75.04e-6, rel=1e-4)


def test_off_grid_frequency_rejected(xy8):
    with pytest.raises(PlanningError):
        plan_protocol(12e9 / 3208.5, 24.06e-6, CLOCK_PERIOD, xy8)


def test_cycle_shorter_than_subsequence_rejected(xy8):
    with pytest.raises(PlanningError):
        plan_protocol(F0, 2e-6, CLOCK_PERIOD, xy8)


def test_event_ticks_are_integers(protocol):
    events = protocol.event_ticks(5)
    assert events.dtype == np.int64
    assert np.all(np.diff(events[:, 0]) > 0)
    assert events[0, 0] == 5 * protocol.tau_ticks
    assert events[-1, 1] < 6 * protocol.tau_ticks
    assert len(events) == protocol.subsequence.n_pulses + 2


def test_nyquist_band(protocol):
    assert nyquist_band(protocol) == pytest.approx(1.0 / (4.0 * protocol.tau_sr))
    assert nyquist_band(protocol, pair_subtraction=False) == pytest.approx(1.0 / (2.0 * protocol.tau_sr))


# ─── Series ───

@pytest.mark.parametrize("fraction", [-0.4, -0.1, 0.1, 0.4])
def test_offset_recovered_inside_band(protocol, quiet_sensor, fraction):
    offset = fraction * nyquist_band(protocol)
    series = run_sr(_tone(protocol, offset), protocol, quiet_sensor, seed=1)
    peak, bin_width = _peak_frequency(series)
    assert abs(peak - abs(offset)) <= 0.5 * bin_width


def test_offset_above_nyquist_folds(protocol, quiet_sensor):
    nyquist = nyquist_band(protocol)
    series = run_sr(_tone(protocol, 1.3 * nyquist), protocol, quiet_sensor, seed=1)
    peak, bin_width = _peak_frequency(series)
    assert abs(peak - 0.7 * nyquist) <= 0.5 * bin_width


def test_pair_subtraction_sets_sampling(protocol):
    single = sensor_preset("paper-single-nv")
    series = run_sr(_tone(protocol, 100.0), protocol, single, seed=0)
    assert series.dt == pytest.approx(protocol.tau_sr)
    assert len(series) == protocol.n_iterations
    assert not series.pair_subtracted


def test_run_sr_is_seeded(protocol, ensemble_sensor):
    sample = _tone(protocol, 500.0)
    a = run_sr(sample, protocol, ensemble_sensor, seed=11)
    b = run_sr(sample, protocol, ensemble_sensor, seed=11)
    c = run_sr(sample, protocol, ensemble_sensor, seed=12)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert len(a) == protocol.n_iterations // 2


def test_average_series_matches_spawned_runs(protocol, ensemble_sensor):
    sample = _tone(protocol, 500.0)
    averaged = average_series(sample, protocol, ensemble_sensor, seed=7, n_averages=3)
    children = np.random.SeedSequence(7).spawn(3)
    manual = average_runs([run_sr(sample, protocol, ensemble_sensor, c) for c in children])
    np.testing.assert_array_equal(averaged.samples, manual.samples)
    assert averaged.n_averages == 3


def test_average_runs_rejects_mixed_protocols(protocol, ensemble_sensor):
    sample = _tone(protocol, 500.0)
    a = run_sr(sample, protocol, ensemble_sensor, seed=1)
    b = run_sr(sample, replace(protocol, start_ticks=4), ensemble_sensor, seed=1)
    with pytest.raises(SeriesMismatchError):
        average_runs([a, b])
    with pytest.raises(SeriesMismatchError):
        average_runs([])


def test_short_residual_trace_rejected(protocol, ensemble_sensor):
    residual = ResidualModulation(times=np.array([0.0, 0.01]), phase=np.array([0.0, 0.1]))
    sample = replace(_tone(protocol, 500.0), residual=residual)
    with pytest.raises(ConfigurationError):
        run_sr(sample, protocol, ensemble_sensor, seed=1)


def test_tone_at_f0_gives_a_flat_series(protocol, quiet_sensor):
    on_grid = _tone(protocol, 0.0)
    np.testing.assert_allclose(np.ptp(phase_record(on_grid, protocol, quiet_sensor).phases()), 0.0, atol=1e-15)
    flat = run_sr(on_grid, protocol, quiet_sensor, seed=2).samples
    moving = run_sr(_tone(protocol, 200.0), protocol, quiet_sensor, seed=2).samples
    assert np.std(flat) < 1e-3 * np.std(moving)


def test_jitter_keeps_the_line(protocol, quiet_sensor):
    sample = _tone(protocol, 800.0)
    series = run_sr(sample, protocol, quiet_sensor, seed=5, jitter_s=1e-10)
    peak, bin_width = _peak_frequency(series)
    assert abs(peak - 800.0) <= 0.5 * bin_width


# ─── Noise floor ───

def test_noise_floor_matches_closed_form(protocol, ensemble_sensor):
    closed = sensitivity_estimate(ensemble_sensor, protocol.tau_sr, protocol.subsequence)
    measured = measure_noise_floor(ensemble_sensor, protocol, seed=3, duration=0.5)
    assert measured / closed == pytest.approx(1.0, abs=0.15)


def test_noise_floor_averages_down(protocol, ensemble_sensor):
    one = measure_noise_floor(ensemble_sensor, protocol, seed=3, duration=0.5)
    four = measure_noise_floor(ensemble_sensor, protocol, seed=4, duration=0.5, n_averages=4)
    assert one / four == pytest.approx(2.0, rel=0.1)


def test_noise_floor_falls_as_inverse_root_of_averages(protocol, ensemble_sensor):
    single = measure_noise_floor(ensemble_sensor, protocol, seed=9, duration=0.5)
    for m in (4, 16, 64):
        averaged = measure_noise_floor(ensemble_sensor, protocol, seed=9, duration=0.5, n_averages=m)
        assert averaged * np.sqrt(m) == pytest.approx(single, rel=0.15)


def test_phase_record_is_linear_in_amplitude(protocol, ensemble_sensor):
    weak = SampleModel((SpectralLine(protocol.f0_grid + 200.0, 1e-9),))
    strong = SampleModel((SpectralLine(protocol.f0_grid + 200.0, 2e-9),))
    a = phase_record(weak, protocol, ensemble_sensor)
    b = phase_record(strong, protocol, ensemble_sensor)
    assert len(a.times) == len(protocol.window_start_ticks())
    np.testing.assert_allclose(b.phases(), 2.0 * a.phases(), rtol=1e-12, atol=1e-15)
    assert np.max(np.abs(a.phases())) > 0
    silent = phase_record(SampleModel((SpectralLine(protocol.f0_grid, 0.0),)), protocol, ensemble_sensor)
    assert not np.any(silent.phases())
