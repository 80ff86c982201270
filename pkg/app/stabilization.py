"""Dual-rate B0 stabilization and injection of its residual into sample models."""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import integrate, stats

from app.constants import CONSTANTS
from app.errors import ConfigurationError
from app.signal_model import FWHM_PER_SIGMA, ResidualModulation, SampleModel

logger = logging.getLogger(__name__)


# ─── Types ───

@dataclass(frozen=True)
class DriftModel:
    random_walk_sigma: float = 0.0    # T/√s, coil current drift seen by both sensors
    white_sigma: float = 0.0          # T
    slow_drift_rate: float = 0.0      # T/√s, inter-sensor offset diffusion

    def __post_init__(self):
        if min(self.random_walk_sigma, self.white_sigma, self.slow_drift_rate) < 0:
            raise ConfigurationError("drift parameters must be >= 0")


@dataclass(frozen=True)
class LoopConfig:
    fast_bandwidth: float = 12.5      # Hz
    slow_period: float = 300.0        # s
    sensor_noise: float = 0.0         # T per measurement
    actuator_resolution: float = 0.0  # T
    enabled: bool = True
    gain: float = 1.0

    def __post_init__(self):
        if not self.fast_bandwidth > 0:
            raise ConfigurationError(f"fast_bandwidth must be > 0, got {self.fast_bandwidth}")
        if not self.slow_period > 1.0 / self.fast_bandwidth:
            raise ConfigurationError("slow_period must exceed one fast-loop interval")
        if self.sensor_noise < 0 or self.actuator_resolution < 0:
            raise ConfigurationError("sensor_noise and actuator_resolution must be >= 0")


PAPER_DRIFT = DriftModel(random_walk_sigma=20e-9, white_sigma=5e-9, slow_drift_rate=2.75e-9)
PAPER_LOOP = LoopConfig(fast_bandwidth=12.5, slow_period=300.0, sensor_noise=3e-9)


@dataclass(frozen=True, eq=False)
class LockResult:
    times: np.ndarray
    field_trace: np.ndarray           # T, deviation at the primary sensor
    correction: np.ndarray            # T, applied by the fast loop
    residual_rms: float
    end_of_interval_rms: float
    effective_residual: float
    slow_samples: np.ndarray          # deviation just before each setpoint correction
    setpoint_corrections: np.ndarray
    final_deviation: float

    def summary(self) -> dict:
        return {
            "residual_rms_tesla": self.residual_rms,
            "end_of_interval_rms_tesla": self.end_of_interval_rms,
            "effective_residual_tesla": self.effective_residual,
            "final_deviation_tesla": self.final_deviation,
            "n_setpoint_corrections": int(len(self.setpoint_corrections)),
        }


# ─── Lock simulation ───

def _random_walk(rng: np.random.Generator, sigma: float, n: int, dt: float) -> np.ndarray:
    steps = rng.normal(0.0, sigma * math.sqrt(dt), n)
    steps[0] = 0.0
    return np.cumsum(steps)


def _rms(x: np.ndarray) -> float:
    return math.sqrt(float(np.mean(np.square(x)))) if len(x) else 0.0


def simulate_lock(drift: DriftModel, loop: LoopConfig, duration: float, dt: float, seed) -> LockResult:
    """
    Deadbeat fast loop on the secondary sensor plus periodic setpoint re-zeroing.

    Each fast update sets the correction so the secondary reads the setpoint;
    the primary then sees the setpoint minus the inter-sensor offset. Every
    slow_period the primary's measured deviation is removed from the setpoint.
    """
    if not dt > 0 or not duration > dt:
        raise ConfigurationError("simulate_lock needs 0 < dt < duration")
    if dt > 1.0 / (2.0 * loop.fast_bandwidth):
        raise ConfigurationError(f"dt = {dt} s exceeds half the fast-loop interval")

    rng = np.random.default_rng(seed)
    n = int(round(duration / dt))
    times = np.arange(n) * dt
    disturbance = _random_walk(rng, drift.random_walk_sigma, n, dt)
    if drift.white_sigma > 0:
        disturbance = disturbance + rng.normal(0.0, drift.white_sigma, n)
    offset = _random_walk(rng, drift.slow_drift_rate, n, dt)

    if not loop.enabled:
        correction = np.zeros(n)
        residual = disturbance
        slow_samples = np.array([])
        corrections = np.array([])
    else:
        fast_stride = int(round(1.0 / (loop.fast_bandwidth * dt)))
        slow_stride = max(fast_stride, int(round(loop.slow_period / dt)))
        correction = np.empty(n)
        residual = np.empty(n)
        setpoint = 0.0
        slow_list, corr_list = [], []
        for start in range(0, n, slow_stride):
            stop = min(start + slow_stride, n)
            if start > 0:
                before = residual[start - 1]
                measured = before + rng.normal(0.0, loop.sensor_noise)
                delta = -loop.gain * measured
                setpoint += delta
                slow_list.append(before)
                corr_list.append(delta)
            updates = np.arange(start, stop, fast_stride)
            noise = rng.normal(0.0, loop.sensor_noise, len(updates)) if loop.sensor_noise > 0 else 0.0
            values = setpoint - disturbance[updates] - offset[updates] - noise
            if loop.actuator_resolution > 0:
                values = np.round(values / loop.actuator_resolution) * loop.actuator_resolution
            held = np.repeat(values, np.diff(np.append(updates, stop)))
            correction[start:stop] = held
            residual[start:stop] = disturbance[start:stop] + held
        slow_samples = np.array(slow_list)
        corrections = np.array(corr_list)

    end_rms = _rms(slow_samples)
    result = LockResult(
        times=times,
        field_trace=residual,
        correction=correction,
        residual_rms=_rms(residual),
        end_of_interval_rms=end_rms,
        effective_residual=0.5 * end_rms,
        slow_samples=slow_samples,
        setpoint_corrections=corrections,
        final_deviation=float(residual[-1]),
    )
    logger.debug(
        f"lock: {n} steps, rms={result.residual_rms * 1e9:.2f} nT, "
        f"end-of-interval rms={end_rms * 1e9:.2f} nT over {len(slow_samples)} corrections"
    )
    return result


def slow_sample_moments(result: LockResult) -> dict:
    """Skewness and excess kurtosis of the slow-loop samples."""
    if len(result.slow_samples) < 4:
        raise ConfigurationError("moment check needs at least 4 slow-loop samples")
    return {
        "skew": float(stats.skew(result.slow_samples)),
        "excess_kurtosis": float(stats.kurtosis(result.slow_samples)),
    }


def histogram(result: LockResult, bins: int = 41) -> tuple[np.ndarray, np.ndarray]:
    """Bin centres (T) and counts of the slow-loop samples."""
    counts, edges = np.histogram(result.slow_samples, bins=bins)
    return 0.5 * (edges[1:] + edges[:-1]), counts


# ─── Linewidth impact ───

def broadening_from_noise(sigma: float) -> float:
    """Gaussian FWHM (Hz) of a proton line under a Gaussian field spread σ."""
    if sigma < 0:
        raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
    return FWHM_PER_SIGMA * sigma * CONSTANTS.gamma_p_freq


def inject_residual(sample: SampleModel, times: np.ndarray, field: np.ndarray) -> SampleModel:
    """
    Modulate every line of the sample by γ_p·ΔB(t).

    The phase is the running integral of the field trace; an all-zero trace
    returns the sample unchanged.
    """
    times = np.asarray(times, dtype=float)
    field = np.asarray(field, dtype=float)
    if len(times) != len(field) or len(times) < 2:
        raise ConfigurationError("field trace needs matching times and values, length >= 2")
    if not np.any(field):
        return sample
    start = times[0]
    if sample.residual is not None:
        # Union grid keeps the breakpoints of both traces
        grid = np.union1d(times - start, sample.residual.times)
        grid = grid[grid >= 0.0]
        field = np.interp(grid, times - start, field)
        prior = sample.residual.at(grid)
    else:
        grid = times - start
        prior = 0.0
    phase = 2.0 * np.pi * CONSTANTS.gamma_p_freq * integrate.cumulative_trapezoid(field, grid, initial=0.0)
    return replace(sample, residual=ResidualModulation(times=grid, phase=phase + prior))


def constant_trace(offset: float, duration: float) -> tuple[np.ndarray, np.ndarray]:
    """Two-point trace holding `offset` tesla over [0, duration]."""
    return np.array([0.0, duration]), np.array([offset, offset])


def static_offsets(sigma: float, m: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Stratified Gaussian field offsets, one per average."""
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    rng = np.random.default_rng(rng)
    u = (rng.permutation(m) + rng.uniform(size=m)) / m
    return sigma * stats.norm.ppf(u)


def lock_residuals(drift: DriftModel, loop: LoopConfig, duration: float, dt: float,
                   seeds, sample: SampleModel) -> list[Optional[ResidualModulation]]:
    """One simulated lock trace per seed, converted to residual modulations of `sample`."""
    residuals = []
    for seed in seeds:
        lock = simulate_lock(drift, loop, duration, dt, seed)
        residuals.append(inject_residual(sample, lock.times, lock.field_trace).residual)
    return residuals
