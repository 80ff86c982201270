"""Scenario orchestration: synthesis, SR simulation, analysis, artifacts and the run registry."""

import asyncio
import functools
import hashlib
import logging
import math
import platform
import re
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

import lmfit
import numpy as np
import pydantic
import scipy

from app import __version__, artifacts, database, texts
from app.config import config
from app.constants import CONSTANTS
from app.errors import ConfigurationError, SimulationError
from app.geometry import (
    NVLayerModel,
    ac_zeeman_broadening,
    back_action_map,
    back_action_prefactor,
    back_action_stats,
    back_action_volume_mean,
    duty_cycle_broadening,
)
from app.nv_response import (
    PulseSequenceSpec,
    SensorModel,
    pulse_on_fraction,
    sensitivity_estimate,
    sensor_preset,
    two_pi_field,
)
from app.scenarios import (
    AnalysisSpec,
    BackActionInjectionSpec,
    LayerSpec,
    ProtocolSpec,
    SampleSpec,
    Scenario,
    ScenarioValidationError,
    SensorSpec,
    canonical_json,
    effective_seed,
    evaluate_checks,
    load_scenario,
    scenario_hash,
    with_overrides,
)
from app.signal_model import (
    FWHM_PER_SIGMA,
    FieldNoise,
    IsochromatEnsemble,
    PiPulseSchedule,
    SampleModel,
    SpectralLine,
    build_named_sample,
    reference_pulse,
    with_lines,
)
from app.spectral import (
    AnalysisError,
    CalibrationError,
    LineshapeFit,
    Spectrum,
    calibrate_amplitude,
    fit_peaks,
    fwhm_report,
    gyromagnetic_fit,
    parseval_residual,
    peak_intensity_ratio,
    peak_splitting,
    periodogram,
    preprocess,
    window_constant,
)
from app.sr_engine import (
    SRProtocol,
    SRTimeSeries,
    measure_noise_floor,
    phase_record,
    plan_protocol,
    run_sr,
)
from app.stabilization import (
    DriftModel,
    LoopConfig,
    broadening_from_noise,
    constant_trace,
    histogram,
    inject_residual,
    lock_residuals,
    simulate_lock,
    slow_sample_moments,
    static_offsets,
)

logger = logging.getLogger(__name__)

# Averages per worker task; fixed so the summation order never depends on the worker count
AVERAGE_BATCH = 16
REFERENCE_HALF_WIDTH = 250.0    # Hz, fit window around the reference pulse

_window_constant = functools.lru_cache(maxsize=None)(window_constant)

# First-peak metrics copied into sweep summary rows
SUMMARY_COLUMNS = (
    ("centers_hz", "center_hz"),
    ("center_spread_hz", "center_spread_hz"),
    ("fwhm_hz", "fwhm_hz"),
    ("fwhm_spread_hz", "fwhm_spread_hz"),
    ("absolute_centers_hz", "absolute_center_hz"),
)


# ─── Run record ───

@dataclass
class RunRecord:
    scenario_hash: str
    name: str
    kind: str
    seed: int
    status: str
    started_at: str
    out_dir: str
    finished_at: Optional[str] = None
    artifacts: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.status == "ok" and all(c["passed"] for c in self.checks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def versions() -> dict:
    return {
        "app": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "lmfit": lmfit.__version__,
        "pydantic": pydantic.VERSION,
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_dir(name: str, digest: str, base: Optional[Path] = None) -> Path:
    safe = re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_") or "run"
    return (base or Path(config.out_dir)) / f"{safe}-{digest[:12]}"


# ─── Builders ───

def build_sample(spec: SampleSpec, duration: Optional[float] = None) -> SampleModel:
    """Sample model from its spec; π-pulse times must fall inside `duration` when given."""
    lines = tuple(
        SpectralLine(
            frequency=line.frequency_hz,
            amplitude=line.amplitude_tesla,
            phase0=line.phase_rad,
            t2=line.t2_s if line.t2_s is not None else math.inf,
            gate_start=line.gate_start_s,
            gate_stop=line.gate_stop_s,
        )
        for line in spec.lines
    )
    if spec.named is not None:
        sample = build_named_sample(spec.named, spec.b0_tesla, spec.line_scale_tesla, spec.n_isochromats)
        if lines:
            sample = with_lines(sample, lines)
    else:
        sample = SampleModel(lines)
    if spec.ensemble is not None:
        sample = replace(sample, ensemble=IsochromatEnsemble(spec.ensemble.kind, spec.ensemble.width_hz,
                                                             spec.n_isochromats))
    if spec.pi_pulses_s:
        if duration is not None and max(spec.pi_pulses_s) >= duration:
            raise ConfigurationError(
                f"pi pulse at {max(spec.pi_pulses_s)} s lies beyond the {duration:.6g} s signal record"
            )
        sample = replace(sample, pi_schedule=PiPulseSchedule(tuple(spec.pi_pulses_s)))
    if spec.field_noise is not None:
        sample = replace(sample, field_noise=FieldNoise(spec.field_noise.kind, spec.field_noise.sigma_tesla))
    return sample


def build_sensor(spec: SensorSpec) -> SensorModel:
    sensor = sensor_preset(spec.preset)
    overrides = {
        "contrast": spec.contrast,
        "photons_per_readout": spec.photons_per_readout,
        "pair_subtraction": spec.pair_subtraction,
    }
    return replace(sensor, **{k: v for k, v in overrides.items() if v is not None})


def build_protocol(spec: ProtocolSpec) -> SRProtocol:
    seq = PulseSequenceSpec.for_frequency(spec.family, spec.repetitions, spec.f0_hz, spec.rabi_hz)
    return plan_protocol(
        spec.f0_hz, spec.target_tau_s, spec.clock_period_s, seq,
        n_iterations=spec.n_iterations, start_ticks=spec.start_ticks, nv_drive_frequency=spec.nv_drive_hz,
    )


def build_layer(spec: LayerSpec) -> NVLayerModel:
    return NVLayerModel(spec.polarized_density_per_m3, spec.fwhm_x_m, spec.fwhm_y_m, spec.thickness_m)


def _seed_ints(seed: int, k: int) -> list[int]:
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in np.random.SeedSequence(seed).spawn(k)]


# ─── Parallel averaging ───

async def _bounded(calls: list, workers: int) -> list:
    """Run blocking calls in threads, at most `workers` at a time; results keep call order."""
    sem = asyncio.Semaphore(workers)

    async def one(fn, args):
        async with sem:
            return await asyncio.to_thread(fn, *args)

    return await asyncio.gather(*(one(fn, args) for fn, args in calls))


def _batch_sum(samples: list[SampleModel], protocol: SRProtocol, sensor: SensorModel,
               children: list, record, jitter_s: float) -> tuple[np.ndarray, SRTimeSeries]:
    total, last = None, None
    for run_sample, child in zip(samples, children):
        last = run_sr(run_sample, protocol, sensor, child, jitter_s=jitter_s, record=record)
        total = last.samples.copy() if total is None else total + last.samples
    return total, last


async def simulate_average(sample: SampleModel, protocol: SRProtocol, sensor: SensorModel,
                           seed_seq: np.random.SeedSequence, n_averages: int,
                           per_average: Optional[list[SampleModel]] = None, jitter_s: float = 0.0,
                           workers: int = 1, seed: int = 0) -> SRTimeSeries:
    """
    Mean of `n_averages` SR records, batched across worker threads.

    `per_average` optionally replaces the sample for each average (residual
    modulations); the deterministic phase record is shared.
    """
    if per_average is not None and len(per_average) != n_averages:
        raise ConfigurationError("need one sample per average")
    children = seed_seq.spawn(n_averages)
    samples = per_average if per_average is not None else [sample] * n_averages
    record = None if jitter_s > 0 else await asyncio.to_thread(phase_record, sample, protocol, sensor)

    calls = []
    for start in range(0, n_averages, AVERAGE_BATCH):
        stop = min(start + AVERAGE_BATCH, n_averages)
        calls.append((_batch_sum, (samples[start:stop], protocol, sensor, children[start:stop], record, jitter_s)))
    results = await _bounded(calls, workers)

    total = results[0][0]
    for partial, _ in results[1:]:
        total = total + partial
    template = results[0][1]
    return replace(template, samples=total / n_averages, n_averages=n_averages, seed=seed)


# ─── SR scenarios ───

def _horizon(protocol: SRProtocol) -> float:
    return protocol.start_ticks / protocol.clock_hz + protocol.duration + 2.0 * protocol.tau_sr


def back_action_sigma(spec: BackActionInjectionSpec, duty: float) -> tuple[float, dict]:
    """Gaussian field spread (T) equivalent to the back-action broadening at `duty`."""
    layer = build_layer(spec.layer)
    bmap = back_action_map(layer, spec.z_plane_m, extent=spec.extent_m, resolution=spec.resolution)
    stats = back_action_stats(bmap)
    prefactor = back_action_prefactor(layer.polarized_density)
    broadening = duty_cycle_broadening(stats, duty, prefactor)
    sigma = broadening / (FWHM_PER_SIGMA * CONSTANTS.gamma_p_freq)
    info = {
        "prefactor_tesla": prefactor,
        "spread": stats.spread,
        "duty": duty,
        "broadening_hz": broadening,
        "sigma_tesla": sigma,
    }
    return sigma, info


def residual_samples(scenario: Scenario, sample: SampleModel, protocol: SRProtocol,
                     aux_seed: np.random.SeedSequence, extra_sigma: float = 0.0) -> Optional[list[SampleModel]]:
    """Per-average samples carrying the configured residual field (None when there is none)."""
    spec = scenario.residual
    m = scenario.n_averages
    horizon = _horizon(protocol)
    lock_ss, static_ss = aux_seed.spawn(2)
    samples = [sample] * m

    if spec is not None and spec.kind == "lock":
        drift = DriftModel(spec.drift.random_walk_sigma_tesla_per_rts, spec.drift.white_sigma_tesla,
                           spec.drift.slow_drift_rate_tesla_per_rts)
        loop = LoopConfig(spec.loop.fast_bandwidth_hz, spec.loop.slow_period_s, spec.loop.sensor_noise_tesla,
                          spec.loop.actuator_resolution_tesla, spec.loop.enabled, spec.loop.gain)
        residuals = lock_residuals(drift, loop, horizon + 2.0 * spec.dt_s, spec.dt_s, lock_ss.spawn(m), sample)
        samples = [replace(sample, residual=r) for r in residuals]

    sigma = spec.sigma_tesla if spec is not None and spec.kind == "static" else 0.0
    sigma = math.hypot(sigma, extra_sigma)
    if sigma > 0:
        offsets = static_offsets(sigma, m, np.random.default_rng(static_ss))
        samples = [inject_residual(s, *constant_trace(b, horizon)) for s, b in zip(samples, offsets)]

    if spec is None and sigma == 0:
        return None
    return samples


def fit_window(spec: Spectrum, analysis) -> Optional[tuple[float, float]]:
    if analysis.window_hz is not None:
        return tuple(analysis.window_hz)
    if analysis.window_half_width_hz is None:
        return None
    usable = spec.frequencies > 3.0 / spec.duration
    if not np.any(usable):
        raise AnalysisError("spectrum has no bins above DC to centre a window on")
    center = float(spec.frequencies[usable][np.argmax(spec.magnitudes[usable])])
    half = analysis.window_half_width_hz
    return max(0.0, center - half), center + half


def analyze_series(series: SRTimeSeries, analysis) -> tuple[SRTimeSeries, Spectrum, LineshapeFit, float]:
    """Preprocess, transform and fit one series as configured."""
    kept = preprocess(series, analysis.discard)
    spec = periodogram(kept, analysis.zero_pad)
    parseval = parseval_residual(kept, spec)
    window = fit_window(spec, analysis)
    init = [tuple(g) for g in analysis.init_hz] if analysis.init_hz else None
    fit = fit_peaks(spec, analysis.n_peaks, init=init, model=analysis.model, window=window)
    return kept, spec, fit, parseval


def _signal_t2(sample: SampleModel) -> float:
    """Exponential decay time of the first line including a Lorentzian ensemble."""
    line = sample.lines[0]
    rate = 0.0 if math.isinf(line.t2) else 1.0 / line.t2
    if sample.ensemble is not None and sample.ensemble.width > 0:
        if sample.ensemble.kind != "lorentzian":
            raise CalibrationError("amplitude calibration needs an exponential signal envelope")
        rate += math.pi * sample.ensemble.width
    return math.inf if rate == 0 else 1.0 / rate


def calibrate(scenario: Scenario, sample: SampleModel, spec: Spectrum, fit: LineshapeFit,
              protocol: SRProtocol) -> dict:
    ref = scenario.reference
    offset = ref.offset_hz
    window = (max(0.0, offset - REFERENCE_HALF_WIDTH), offset + REFERENCE_HALF_WIDTH)
    ref_fit = fit_peaks(spec, 1, model="lorentzian", window=window)
    amplitude = calibrate_amplitude(
        spec, fit.peaks[0], ref_fit.peaks[0], ref.amplitude_tesla, ref.duration_s, _signal_t2(sample),
    )
    return {
        "calibrated_amplitude_tesla": amplitude,
        "reference_center_hz": ref_fit.peaks[0].center,
        "reference_fwhm_hz": ref_fit.peaks[0].fwhm,
    }


def _protocol_info(protocol: SRProtocol, sensor: SensorModel) -> dict:
    seq = protocol.subsequence
    return {
        "f0_grid_hz": protocol.f0_grid,
        "period_ticks": protocol.period_ticks,
        "k": protocol.k,
        "tau_sr_s": protocol.tau_sr,
        "duty": protocol.duty,
        "duration_s": protocol.duration,
        "sequence": seq.label,
        "rabi_hz": seq.rabi_frequency,
        "pulse_on_fraction": pulse_on_fraction(seq, protocol.tau_sr),
        "two_pi_field_tesla": two_pi_field(seq.center_frequency, seq.n_pulses),
        "sensitivity_tesla_rthz": sensitivity_estimate(sensor, protocol.tau_sr, seq),
    }


def _fit_metrics(fits: list[LineshapeFit], protocol: SRProtocol) -> dict:
    widths = fwhm_report(fits)
    centers = np.array([[p.center for p in f.peaks] for f in fits])
    amplitudes = np.array([[p.amplitude for p in f.peaks] for f in fits])
    ddof = 1 if len(fits) > 1 else 0
    mean_centers = centers.mean(axis=0)
    metrics = {
        "model": fits[0].model,
        "models": [f.model for f in fits],
        "centers_hz": mean_centers.tolist(),
        "center_spread_hz": (centers.std(axis=0, ddof=ddof) if ddof else np.zeros(len(mean_centers))).tolist(),
        "absolute_centers_hz": (protocol.f0_grid + mean_centers).tolist(),
        "fwhm_hz": [w.fwhm for w in widths],
        "fwhm_spread_hz": [w.spread for w in widths],
        "amplitudes": amplitudes.mean(axis=0).tolist(),
    }
    if len(fits[0].peaks) > 1:
        metrics["splitting_hz"] = float(np.mean([peak_splitting(f) for f in fits]))
        metrics["intensity_ratio"] = float(np.mean([peak_intensity_ratio(f) for f in fits]))
    return metrics


def fit_text(fit: LineshapeFit) -> str:
    out = texts.FIT_HEADER.format(model=fit.model, rss=fit.rss, baseline=fit.baseline)
    for i, peak in enumerate(fit.peaks):
        out += texts.FIT_PEAK.format(index=i, center=peak.center, fwhm=peak.fwhm, amplitude=peak.amplitude)
    return out


async def _run_sr(scenario: Scenario, seed: int, out: Path, plots: bool, workers: int) -> tuple[dict, dict]:
    protocol = build_protocol(scenario.protocol)
    sample = build_sample(scenario.sample, protocol.duration)
    sensor = build_sensor(scenario.sensor)
    if scenario.reference is not None:
        ref = scenario.reference
        sample = with_lines(sample, [reference_pulse(protocol.f0_grid + ref.offset_hz, ref.amplitude_tesla,
                                                     ref.start_s, ref.duration_s)])

    extra_sigma, ba_info = 0.0, None
    if scenario.back_action is not None:
        extra_sigma, ba_info = await asyncio.to_thread(back_action_sigma, scenario.back_action, protocol.duty)

    logger.info(
        f"{scenario.name}: {protocol.subsequence.label}, τ_SR={protocol.tau_sr * 1e6:.3f} μs, "
        f"T={protocol.duration:.3f} s, m={scenario.n_averages}, repeats={scenario.repeats}"
    )
    fits, parsevals, calibrations = [], [], []
    first = None
    for r, repeat_ss in enumerate(np.random.SeedSequence(seed).spawn(scenario.repeats)):
        avg_ss, aux_ss = repeat_ss.spawn(2)
        per_average = await asyncio.to_thread(residual_samples, scenario, sample, protocol, aux_ss, extra_sigma)
        series = await simulate_average(
            sample, protocol, sensor, avg_ss, scenario.n_averages, per_average,
            jitter_s=scenario.protocol.jitter_s, workers=workers, seed=seed,
        )
        kept, spec, fit, parseval = await asyncio.to_thread(analyze_series, series, scenario.analysis)
        fits.append(fit)
        parsevals.append(parseval)
        if scenario.reference is not None:
            calibrations.append(await asyncio.to_thread(calibrate, scenario, sample, spec, fit, protocol))
        if first is None:
            first = (series, kept, spec, fit)
        logger.debug(f"{scenario.name}: repeat {r} model={fit.model} fwhm={[p.fwhm for p in fit.peaks]}")

    series, kept, spec, fit = first
    metrics = _fit_metrics(fits, protocol)
    metrics["parseval_residual"] = max(parsevals)
    metrics["record_duration_s"] = kept.duration
    metrics["window_fwhm_hz"] = _window_constant(fit.model) / kept.duration
    metrics["n_averages"] = scenario.n_averages
    metrics["repeats"] = scenario.repeats
    metrics["protocol"] = _protocol_info(protocol, sensor)
    if calibrations:
        metrics["calibrated_amplitude_tesla"] = float(np.mean([c["calibrated_amplitude_tesla"] for c in calibrations]))
        metrics["reference"] = calibrations[0]
    if scenario.residual is not None:
        metrics["residual"] = {"kind": scenario.residual.kind, "sigma_tesla": scenario.residual.sigma_tesla}
    if ba_info is not None:
        metrics["back_action"] = ba_info
    if scenario.ac_zeeman is not None:
        raw = ac_zeeman_broadening(protocol.subsequence.rabi_frequency, scenario.ac_zeeman.detuning_hz)
        metrics["ac_zeeman"] = {
            "rabi_hz": protocol.subsequence.rabi_frequency,
            "detuning_hz": scenario.ac_zeeman.detuning_hz,
            "raw_hz": raw,
            "weighted_hz": raw * metrics["protocol"]["pulse_on_fraction"],
        }

    written = {
        "series_csv": await artifacts.write_text(out / "series.csv", artifacts.series_csv(series)),
        "series_npz": await artifacts.write_bytes(out / "series.npz", artifacts.series_npz(series)),
        "spectrum_csv": await artifacts.write_text(out / "spectrum.csv", artifacts.spectrum_csv(spec)),
        "fit_json": await artifacts.write_json(out / "fit.json", fit.as_dict()),
        "fit_txt": await artifacts.write_text(out / "fit.txt", fit_text(fit)),
    }
    if scenario.repeats > 1:
        rows = [
            {"repeat": r, "model": f.model, "peak": i, "center_hz": p.center, "fwhm_hz": p.fwhm,
             "amplitude": p.amplitude}
            for r, f in enumerate(fits) for i, p in enumerate(f.peaks)
        ]
        written["repeats_csv"] = await artifacts.write_text(out / "repeats.csv", artifacts.rows_csv(rows))
    if plots:
        from app import plots as plotting
        svg = await asyncio.to_thread(plotting.spectrum_svg, spec, fit, scenario.name)
        written["spectrum_svg"] = await artifacts.write_text(out / "spectrum.svg", svg)
    return metrics, written


# ─── Lock, back-action and sensitivity scenarios ───

async def _run_lock(scenario: Scenario, seed: int, out: Path, plots: bool, workers: int) -> tuple[dict, dict]:
    spec = scenario.lock
    drift = DriftModel(spec.drift.random_walk_sigma_tesla_per_rts, spec.drift.white_sigma_tesla,
                       spec.drift.slow_drift_rate_tesla_per_rts)
    loop = LoopConfig(spec.loop.fast_bandwidth_hz, spec.loop.slow_period_s, spec.loop.sensor_noise_tesla,
                      spec.loop.actuator_resolution_tesla, spec.loop.enabled, spec.loop.gain)
    open_loop = replace(loop, enabled=False)
    lock, free = await asyncio.gather(
        asyncio.to_thread(simulate_lock, drift, loop, spec.duration_s, spec.dt_s, seed),
        asyncio.to_thread(simulate_lock, drift, open_loop, spec.duration_s, spec.dt_s, seed),
    )
    metrics = lock.summary()
    metrics["open_loop_rms_tesla"] = free.residual_rms
    metrics["broadening_hz"] = broadening_from_noise(lock.effective_residual)
    metrics["rms_broadening_hz"] = broadening_from_noise(lock.residual_rms)
    if len(lock.slow_samples) >= 4:
        metrics["moments"] = slow_sample_moments(lock)

    written = {"trace_csv": await artifacts.write_text(out / "trace.csv", artifacts.trace_csv(lock, spec.trace_decimation))}
    if len(lock.slow_samples):
        centers, counts = histogram(lock, spec.histogram_bins)
        written["histogram_csv"] = await artifacts.write_text(out / "histogram.csv",
                                                              artifacts.histogram_csv(centers, counts))
    if plots:
        from app import plots as plotting
        svg = await asyncio.to_thread(plotting.lock_svg, lock, spec.trace_decimation)
        written["lock_svg"] = await artifacts.write_text(out / "lock.svg", svg)
    return metrics, written


async def _run_backaction(scenario: Scenario, seed: int, out: Path, plots: bool, workers: int) -> tuple[dict, dict]:
    spec = scenario.backaction
    layer = build_layer(spec.layer)
    prefactor = back_action_prefactor(layer.polarized_density)
    calls = [(back_action_map, (layer, z, spec.extent_m, spec.resolution)) for z in spec.z_planes_m]
    calls.append((back_action_volume_mean, (layer, spec.volume_radius_m, 16, spec.resolution)))
    *maps, volume = await _bounded(calls, workers)

    planes, written = [], {}
    for i, bmap in enumerate(maps):
        stats = back_action_stats(bmap)
        planes.append({"z_m": bmap.z, "levels": bmap.levels, **stats.as_dict()})
        written[f"map_{i}_csv"] = await artifacts.write_text(out / f"map_{i}.csv", artifacts.map_csv(bmap))
        if plots:
            from app import plots as plotting
            svg = await asyncio.to_thread(plotting.map_svg, bmap)
            written[f"map_{i}_svg"] = await artifacts.write_text(out / f"map_{i}.svg", svg)
    first = back_action_stats(maps[0])
    metrics = {
        "prefactor_tesla": prefactor,
        "planes": planes,
        "volume": volume.as_dict(),
        "duty": spec.duty,
        "broadening_hz": duty_cycle_broadening(first, spec.duty, prefactor),
    }
    return metrics, written


def _sensitivity(scenario: Scenario, seed: int) -> dict:
    spec = scenario.sensitivity
    sensor = build_sensor(scenario.sensor)
    protocol = build_protocol(scenario.protocol)
    seq = protocol.subsequence
    closed = sensitivity_estimate(sensor, protocol.tau_sr, seq)
    seeds = _seed_ints(seed, len(spec.photon_scales) + len(spec.averages))

    photons = []
    for scale, s in zip(spec.photon_scales, seeds):
        scaled = replace(sensor, photons_per_readout=sensor.photons_per_readout * scale)
        photons.append({
            "scale": scale,
            "closed_form_tesla_rthz": sensitivity_estimate(scaled, protocol.tau_sr, seq),
            "monte_carlo_tesla_rthz": measure_noise_floor(scaled, protocol, s, spec.duration_s),
        })
    averaging = []
    for m, s in zip(spec.averages, seeds[len(spec.photon_scales):]):
        averaging.append({
            "n_averages": m,
            "monte_carlo_tesla_rthz": measure_noise_floor(sensor, protocol, s, spec.duration_s, n_averages=m),
        })
    baseline = next((p for p in photons if p["scale"] == 1.0), photons[0])
    mc = baseline["monte_carlo_tesla_rthz"]
    lo, hi = photons[0], photons[-1]
    a0, a1 = averaging[0], averaging[-1]
    return {
        "closed_form_tesla_rthz": closed,
        "monte_carlo_tesla_rthz": mc,
        "agreement": mc / closed,
        "photon_scaling_ratio": (lo["monte_carlo_tesla_rthz"] / hi["monte_carlo_tesla_rthz"])
        / math.sqrt(hi["scale"] / lo["scale"]) if len(photons) > 1 else 1.0,
        "averaging_scaling_ratio": (a0["monte_carlo_tesla_rthz"] / a1["monte_carlo_tesla_rthz"])
        / math.sqrt(a1["n_averages"] / a0["n_averages"]) if len(averaging) > 1 else 1.0,
        "photons": photons,
        "averaging": averaging,
        "protocol": _protocol_info(protocol, sensor),
    }


async def _run_sensitivity(scenario: Scenario, seed: int, out: Path, plots: bool, workers: int) -> tuple[dict, dict]:
    metrics = await asyncio.to_thread(_sensitivity, scenario, seed)
    rows = [{"kind": "photons", **p} for p in metrics["photons"]]
    rows += [{"kind": "averaging", **a} for a in metrics["averaging"]]
    written = {"sensitivity_csv": await artifacts.write_text(out / "sensitivity.csv", artifacts.rows_csv(rows))}
    return metrics, written


RUNNERS = {
    "sr": _run_sr,
    "lock": _run_lock,
    "backaction": _run_backaction,
    "sensitivity": _run_sensitivity,
}


# ─── Entry points ───

def _resolve(ref: Union[str, Path, Scenario], paper_scale: bool) -> Scenario:
    return ref if isinstance(ref, Scenario) else load_scenario(ref, paper_scale=paper_scale)


async def _finish(record: RunRecord, out: Path):
    record.finished_at = _now()
    await artifacts.write_json(out / "record.json", record.to_dict())
    await database.save_run(record.to_dict())


async def run_scenario(ref: Union[str, Path, Scenario], seed: Optional[int] = None,
                       paper_scale: Optional[bool] = None, plots: Optional[bool] = None,
                       workers: Optional[int] = None, base_dir: Optional[Path] = None) -> RunRecord:
    """
    Load, simulate, analyse and persist one scenario.

    The output directory is named by the scenario hash; record.json is written
    for failed runs too before the error propagates.
    """
    paper_scale = config.paper_scale if paper_scale is None else paper_scale
    plots = config.plots_enabled if plots is None else plots
    workers = workers or config.max_workers

    scenario = _resolve(ref, paper_scale)
    if scenario.sweep is not None and not isinstance(ref, Scenario):
        logger.info(f"{scenario.name} declares a sweep; running the base point only (use `sweep` for all points)")
    seed = effective_seed(scenario, seed, config.default_seed)
    digest = scenario_hash(scenario, seed, paper_scale)
    out = run_dir(scenario.name, digest, base_dir)
    out.mkdir(parents=True, exist_ok=True)

    record = RunRecord(
        scenario_hash=digest, name=scenario.name, kind=scenario.kind, seed=seed,
        status="running", started_at=_now(), out_dir=str(out), versions=versions(),
    )
    logger.info(f"Running {scenario.name} [{scenario.kind}] seed={seed} -> {out}")
    try:
        metrics, written = await RUNNERS[scenario.kind](scenario, seed, out, plots, workers)
    except SimulationError as e:
        record.status = "failed"
        record.error = type(e).__name__
        record.metrics = {"message": str(e)}
        await _finish(record, out)
        raise

    record.status = "ok"
    record.metrics = metrics
    record.artifacts = {k: Path(v).name for k, v in written.items()}
    record.checks = evaluate_checks(scenario, metrics)
    await artifacts.write_json(out / "metrics.json", metrics)
    record.artifacts["metrics_json"] = "metrics.json"
    await _finish(record, out)
    failed = [c["metric"] for c in record.checks if not c["passed"]]
    if failed:
        logger.warning(f"{scenario.name}: checks failed: {', '.join(failed)}")
    logger.info(texts.RUN_DONE.format(name=record.name, kind=record.kind, status=record.status, out_dir=out))
    return record


async def analyze_file(path: Path, analysis: AnalysisSpec, plots: Optional[bool] = None) -> RunRecord:
    """Analyse an existing `index,time_s,value` series CSV; the run directory is keyed by content and settings."""
    plots = config.plots_enabled if plots is None else plots
    if not path.is_file():
        raise ConfigurationError(f"series file {path} not found")
    series = await asyncio.to_thread(artifacts.read_series_csv, path)
    payload = path.read_bytes() + canonical_json(analysis).encode("utf-8")
    digest = hashlib.sha256(payload).hexdigest()
    out = run_dir(f"analyze-{path.stem}", digest)
    record = RunRecord(
        scenario_hash=digest, name=f"analyze:{path.name}", kind="analyze", seed=0,
        status="running", started_at=_now(), out_dir=str(out), versions=versions(),
    )
    logger.info(f"Analysing {path} ({len(series)} samples, dt={series.dt:.6e} s) -> {out}")
    try:
        kept, spec, fit, parseval = await asyncio.to_thread(analyze_series, series, analysis)
    except SimulationError as e:
        record.status = "failed"
        record.error = type(e).__name__
        record.metrics = {"message": str(e)}
        await _finish(record, out)
        raise

    widths = fwhm_report(fit)
    record.metrics = {
        "model": fit.model,
        "centers_hz": [p.center for p in fit.peaks],
        "fwhm_hz": [w.fwhm for w in widths],
        "fwhm_spread_hz": [w.spread for w in widths],
        "amplitudes": [p.amplitude for p in fit.peaks],
        "parseval_residual": parseval,
        "record_duration_s": kept.duration,
        "window_fwhm_hz": _window_constant(fit.model) / kept.duration,
    }
    if len(fit.peaks) > 1:
        record.metrics["splitting_hz"] = peak_splitting(fit)
        record.metrics["intensity_ratio"] = peak_intensity_ratio(fit)
    written = {
        "spectrum_csv": await artifacts.write_text(out / "spectrum.csv", artifacts.spectrum_csv(spec)),
        "fit_json": await artifacts.write_json(out / "fit.json", fit.as_dict()),
        "fit_txt": await artifacts.write_text(out / "fit.txt", fit_text(fit)),
    }
    if plots:
        from app import plots as plotting
        svg = await asyncio.to_thread(plotting.spectrum_svg, spec, fit, path.name)
        written["spectrum_svg"] = await artifacts.write_text(out / "spectrum.svg", svg)
    record.status = "ok"
    record.artifacts = {k: Path(v).name for k, v in written.items()}
    await _finish(record, out)
    return record


def _summary_row(label: str, parameter: Optional[str], value, record: Optional[RunRecord],
                 error: Optional[str] = None) -> dict:
    row = {"label": label}
    if parameter is not None:
        row["parameter"] = parameter
        row["value"] = value
    if record is None or record.status != "ok":
        row.update({"status": "failed", "error": error or (record.error if record else None)})
        return row
    m = record.metrics
    row.update({"status": "ok", "error": None, "scenario_hash": record.scenario_hash, "model": m.get("model")})
    for key, column in SUMMARY_COLUMNS:
        if key in m:
            row[column] = m[key][0]
    if "protocol" in m:
        row["duty"] = m["protocol"]["duty"]
        row["rabi_hz"] = m["protocol"]["rabi_hz"]
    if "ac_zeeman" in m:
        row["ac_zeeman_raw_hz"] = m["ac_zeeman"]["raw_hz"]
        row["ac_zeeman_weighted_hz"] = m["ac_zeeman"]["weighted_hz"]
    if "back_action" in m:
        row["back_action_broadening_hz"] = m["back_action"]["broadening_hz"]
    row["checks_passed"] = all(c["passed"] for c in record.checks)
    return row


async def run_sweep(ref: Union[str, Path, Scenario], seed: Optional[int] = None,
                    paper_scale: Optional[bool] = None, plots: Optional[bool] = None,
                    workers: Optional[int] = None) -> tuple[list[RunRecord], RunRecord]:
    """
    One run per sweep point plus a summary table.

    A failing point is logged and reported as failed; the remaining points
    still run.
    """
    paper_scale = config.paper_scale if paper_scale is None else paper_scale
    workers = workers or config.max_workers
    scenario = _resolve(ref, paper_scale)
    if scenario.sweep is None:
        raise ScenarioValidationError(f"{scenario.name}: sweep requires a `sweep` block")
    seed = effective_seed(scenario, seed, config.default_seed)
    digest = scenario_hash(scenario, seed, paper_scale)
    out = run_dir(f"{scenario.name}-sweep", digest)
    out.mkdir(parents=True, exist_ok=True)
    sweep = scenario.sweep
    labels, overrides = sweep.point_labels(), sweep.point_overrides()
    started = _now()
    logger.info(f"Sweep {scenario.name}: {len(labels)} point(s) -> {out}")

    sem = asyncio.Semaphore(workers)

    async def point(i: int):
        async with sem:
            try:
                point_scenario = with_overrides(scenario, overrides[i], labels[i])
                record = await run_scenario(point_scenario, seed=seed, paper_scale=paper_scale, plots=plots,
                                            workers=1, base_dir=out / "points")
                return record, None
            except SimulationError as e:
                logger.warning(f"Sweep point {labels[i]} failed: {type(e).__name__}: {e}")
                return None, type(e).__name__

    results = await asyncio.gather(*(point(i) for i in range(len(labels))))
    records = [r for r, _ in results if r is not None]
    rows = [
        _summary_row(labels[i], sweep.parameter, sweep.values[i] if sweep.parameter else None, rec, err)
        for i, (rec, err) in enumerate(results)
    ]

    metrics = {"points": rows, "n_points": len(rows), "n_ok": sum(r["status"] == "ok" for r in rows)}
    if sweep.report == "gyromagnetic":
        points = []
        for i, (rec, _) in enumerate(results):
            if rec is None or rec.status != "ok":
                continue
            b0 = overrides[i].get("sample.b0_tesla", scenario.sample.b0_tesla)
            points.append((float(b0), rec.metrics["absolute_centers_hz"][0]))
        metrics["gyromagnetic"] = gyromagnetic_fit(points)

    written = {
        "summary_csv": await artifacts.write_text(out / "summary.csv", artifacts.rows_csv(rows)),
        "summary_json": await artifacts.write_json(out / "summary.json", metrics),
    }
    sweep_record = RunRecord(
        scenario_hash=digest, name=scenario.name, kind="sweep", seed=seed, status="ok",
        started_at=started, out_dir=str(out), versions=versions(), metrics=metrics,
        artifacts={k: Path(v).name for k, v in written.items()},
        checks=evaluate_checks(scenario, metrics),
    )
    await _finish(sweep_record, out)
    logger.info(texts.SWEEP_DONE.format(name=scenario.name, ok=metrics["n_ok"], total=len(rows), out_dir=out))
    return records, sweep_record


# ─── Reporting ───

def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


def _report_section(rec: RunRecord) -> tuple[str, list[dict]]:
    text = texts.REPORT_SECTION.format(**rec.to_dict())
    rows = []
    m = rec.metrics
    if rec.kind == "sweep":
        text += texts.SWEEP_TABLE_HEADER.format(label="point", status="status", fwhm="fwhm (Hz)", center="center (Hz)")
        for row in m.get("points", []):
            fwhm = row.get("fwhm_hz")
            spread = row.get("fwhm_spread_hz") or 0.0
            text += texts.SWEEP_TABLE_ROW.format(
                label=row["label"], status=row["status"],
                fwhm="-" if fwhm is None else f"{fwhm:.3f} ± {spread:.3f}",
                center="-" if row.get("center_hz") is None else f"{row['center_hz']:.3f}",
            )
            rows.append({"name": rec.name, "kind": "sweep-point", **row})
        if "gyromagnetic" in m:
            g = m["gyromagnetic"]
            text += texts.GYRO_LINE.format(slope=g["slope"], stderr=g["slope_stderr"], intercept=g["intercept"])
    elif rec.status == "ok":
        if "fwhm_hz" in m:
            for i, (w, s) in enumerate(zip(m["fwhm_hz"], m["fwhm_spread_hz"])):
                text += texts.FIT_PEAK_SPREAD.format(index=i, fwhm=w, spread=s, repeats=m.get("repeats", 1))
        for key, value in m.items():
            if isinstance(value, (int, float, str)) and not isinstance(value, bool):
                text += texts.METRIC_LINE.format(key=key, value=_fmt(value))
    else:
        text += texts.METRIC_LINE.format(key="error", value=f"{rec.error}: {m.get('message', '')}")

    for c in rec.checks:
        text += texts.CHECK_LINE.format(
            mark="PASS" if c["passed"] else "FAIL", metric=c["metric"],
            actual=_fmt(c["actual"]), expected=_fmt(c["expected"]), tolerance=_fmt(c["tolerance"]),
        )
    if rec.checks:
        text += texts.CHECKS_SUMMARY.format(passed=sum(c["passed"] for c in rec.checks), total=len(rec.checks))

    flat = {k: v for k, v in m.items() if isinstance(v, (int, float, str))}
    rows.insert(0, {
        "name": rec.name, "kind": rec.kind, "status": rec.status, "scenario_hash": rec.scenario_hash,
        "seed": rec.seed, "checks_passed": sum(c["passed"] for c in rec.checks), "checks_total": len(rec.checks),
        **flat,
    })
    return text, rows


def report(records: list) -> tuple[str, list[dict]]:
    """Consolidated text report and table rows for run records (RunRecord or dicts)."""
    if not records:
        raise ConfigurationError("report needs at least one run record")
    recs = [r if isinstance(r, RunRecord) else RunRecord.from_dict(r) for r in records]
    text = texts.REPORT_HEADER.format(count=len(recs))
    rows = []
    for rec in recs:
        section, section_rows = _report_section(rec)
        text += section
        rows.extend(section_rows)
    return text, rows
