"""Clock-locked synchronized readout: protocol planning, SR time series, averaging."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from app.errors import ConfigurationError, SimulationError
from app.nv_response import (
    PulseSequenceSpec,
    SensorModel,
    filter_response,
    readout,
    series_slope,
)
from app.signal_model import ResidualModulation, SampleModel, SpectralLine

logger = logging.getLogger(__name__)

# Relative tolerance for snapping a nominal f0 to the clock grid
GRID_TOLERANCE = 1e-4


class PlanningError(SimulationError):
    """Raised when a protocol cannot be placed on the clock grid."""
    pass


class SeriesMismatchError(SimulationError):
    """Raised when averaging series with different protocol metadata."""
    pass


# ─── Protocol ───

@dataclass(frozen=True)
class SRProtocol:
    f0: float                 # nominal centre frequency, Hz
    clock_hz: int
    period_ticks: int         # f0 period on the clock grid
    k: int                    # f0 periods per SR cycle
    n_iterations: int
    subsequence: PulseSequenceSpec
    pulse_ticks: int          # π-pulse duration
    start_ticks: int = 0
    nv_drive_frequency: Optional[float] = None

    @property
    def clock_period(self) -> float:
        return 1.0 / self.clock_hz

    @property
    def f0_grid(self) -> float:
        return self.clock_hz / self.period_ticks

    @property
    def tau_ticks(self) -> int:
        return self.k * self.period_ticks

    @property
    def tau_sr(self) -> float:
        return self.tau_ticks / self.clock_hz

    @property
    def seq_ticks(self) -> int:
        return self.subsequence.n_pulses * self.period_ticks // 2

    @property
    def pi_half_ticks(self) -> int:
        return self.pulse_ticks // 2

    @property
    def duty(self) -> float:
        return self.seq_ticks / self.tau_ticks

    @property
    def duration(self) -> float:
        return self.n_iterations * self.tau_sr

    def with_iterations(self, n_iterations: int) -> "SRProtocol":
        return replace(self, n_iterations=n_iterations)

    def cycle_events(self) -> np.ndarray:
        """
        [start, stop) ticks of every pulse in one cycle, relative to the cycle start.

        Layout: π/2, toggling window (π pulses at odd quarter periods), π/2, dead time.
        """
        h = self.pi_half_ticks
        window = h
        j = np.arange(self.subsequence.n_pulses, dtype=np.int64)
        centers = window + (2 * j + 1) * (self.period_ticks // 4)
        pi = np.stack([centers - self.pulse_ticks // 2, centers + self.pulse_ticks // 2], axis=1)
        first = np.array([[0, h]], dtype=np.int64)
        last = np.array([[window + self.seq_ticks, window + self.seq_ticks + h]], dtype=np.int64)
        return np.concatenate([first, pi, last]).astype(np.int64)

    def event_ticks(self, iteration: int) -> np.ndarray:
        return self.cycle_events() + np.int64(self.start_ticks + iteration * self.tau_ticks)

    def window_start_ticks(self) -> np.ndarray:
        i = np.arange(self.n_iterations, dtype=np.int64)
        return self.start_ticks + i * self.tau_ticks + self.pi_half_ticks


def plan_protocol(f0: float, target_tau: float, clock_period: float, subsequence: PulseSequenceSpec,
                  n_iterations: int = 40_000, start_ticks: int = 0,
                  nv_drive_frequency: Optional[float] = None) -> SRProtocol:
    """
    Place an SR protocol on the integer clock grid.

    The f0 period is snapped to the nearest tick when within GRID_TOLERANCE,
    then k = round(target_tau·f0) periods make one cycle.
    """
    if not f0 > 0:
        raise PlanningError(f"f0 must be > 0, got {f0}")
    if not clock_period > 0:
        raise PlanningError(f"clock period must be > 0, got {clock_period}")
    if n_iterations < 2:
        raise PlanningError(f"n_iterations must be >= 2, got {n_iterations}")

    clock_hz = int(round(1.0 / clock_period))
    if abs(clock_hz * clock_period - 1.0) > 1e-9:
        raise PlanningError(f"clock period {clock_period} s is not the reciprocal of an integer frequency")

    exact = clock_hz / f0
    period_ticks = int(round(exact))
    if period_ticks < 4 or abs(exact - period_ticks) / exact > GRID_TOLERANCE:
        raise PlanningError(
            f"f0 = {f0} Hz is off the clock grid: period is {exact:.6f} ticks, "
            f"not an integer within {GRID_TOLERANCE:g}"
        )
    if period_ticks % 4:
        raise PlanningError(
            f"f0 period of {period_ticks} ticks is not divisible by 4; π pulses at odd quarter periods need it"
        )

    if nv_drive_frequency is not None:
        drive = clock_hz / nv_drive_frequency
        if abs(drive - round(drive)) > 1e-9 * drive:
            raise PlanningError(f"NV drive frequency {nv_drive_frequency} Hz is off the clock grid ({drive:.6f} ticks)")

    pulse_ticks = 4 * int(round(clock_hz / (8.0 * subsequence.rabi_frequency)))
    if pulse_ticks < 4:
        raise PlanningError(f"π pulse at {subsequence.rabi_frequency} Hz Rabi is shorter than the clock resolution")
    if pulse_ticks >= period_ticks // 2:
        raise PlanningError(f"π pulse of {pulse_ticks} ticks does not fit the {period_ticks // 2}-tick spacing")

    seq = replace(subsequence, pulse_spacing=(period_ticks / 2) / clock_hz)
    seq_ticks = seq.n_pulses * period_ticks // 2

    f0_grid = clock_hz / period_ticks
    k = int(round(target_tau * f0_grid))
    if k < 1 or k * period_ticks < seq_ticks + pulse_ticks:
        raise PlanningError(
            f"target τ_SR = {target_tau:.4e} s gives k = {k}, shorter than the "
            f"{seq.label} subsequence ({seq_ticks} ticks plus π/2 pulses)"
        )

    protocol = SRProtocol(
        f0=f0, clock_hz=clock_hz, period_ticks=period_ticks, k=k,
        n_iterations=n_iterations, subsequence=seq, pulse_ticks=pulse_ticks,
        start_ticks=start_ticks, nv_drive_frequency=nv_drive_frequency,
    )
    logger.debug(
        f"Planned {seq.label}: P={period_ticks} ticks, k={k}, τ_SR={protocol.tau_sr:.6e} s, duty={protocol.duty:.3f}"
    )
    return protocol


def nyquist_band(protocol: SRProtocol, pair_subtraction: bool = True) -> float:
    """Largest unaliased offset 1/(2·dt); pair subtraction doubles dt."""
    dt = 2.0 * protocol.tau_sr if pair_subtraction else protocol.tau_sr
    return 1.0 / (2.0 * dt)


# ─── Time series ───

@dataclass(frozen=True, eq=False)
class SRTimeSeries:
    samples: np.ndarray
    dt: float
    protocol: Optional[SRProtocol]
    seed: Optional[int] = None
    n_averages: int = 1
    start_time: float = 0.0
    pair_subtracted: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"series dt must be > 0, got {self.dt}")
        if len(self.samples) < 1:
            raise ConfigurationError("series needs at least one sample")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(len(self.samples)) * self.dt

    @property
    def duration(self) -> float:
        return len(self.samples) * self.dt


@dataclass(frozen=True, eq=False)
class PhaseRecord:
    """Deterministic per-iteration phasors; the common modulation is applied per run."""

    times: np.ndarray         # window starts, s
    z: np.ndarray             # Σ_lines A·e^{iθ}·env·F·χ
    gain: float               # 2π·γ_NV
    in_band: float            # 2π·γ_NV·|F(f0)|

    def phases(self, residual: Optional[ResidualModulation] = None) -> np.ndarray:
        if residual is None:
            return self.gain * self.z.real
        if residual.duration < self.times[-1]:
            raise ConfigurationError(
                f"residual trace covers {residual.duration:.3f} s, the record needs {self.times[-1]:.3f} s"
            )
        return self.gain * np.real(self.z * np.exp(1j * residual.at(self.times)))


def phase_record(sample: SampleModel, protocol: SRProtocol, sensor: SensorModel,
                 jitter_ticks: Optional[np.ndarray] = None) -> PhaseRecord:
    """
    Phasor of every subsequence window.

    The carrier phase at a window start is split into the exact grid part
    2π·(ticks mod P)/P and the offset part 2π·(f − f0_grid)·t.
    """
    ticks = protocol.window_start_ticks()
    if jitter_ticks is not None:
        ticks = ticks + jitter_ticks
    t = ticks / protocol.clock_hz
    grid_phase = 2.0 * np.pi * (np.mod(ticks, protocol.period_ticks) / protocol.period_ticks)
    seq = protocol.subsequence

    z = np.zeros(len(t), dtype=complex)
    for line in sample.lines:
        if line.amplitude == 0:
            continue
        decay = 0.0 if math.isinf(line.t2) else 1.0 / line.t2
        response = filter_response(seq, line.frequency, decay)
        theta = grid_phase + 2.0 * np.pi * (line.frequency - protocol.f0_grid) * t + line.phase0
        z += (line.amplitude * response) * line.envelope(t) * np.exp(1j * theta)
    if sample.ensemble is not None and np.any(z != 0):
        z *= sample.coherence(t)

    gain = 2.0 * np.pi * sensor.gyromagnetic_nv
    in_band = gain * abs(filter_response(seq, protocol.f0_grid))
    return PhaseRecord(times=t, z=z, gain=gain, in_band=in_band)


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _readout_series(phases: np.ndarray, sensor: SensorModel, rng: np.random.Generator) -> np.ndarray:
    if not sensor.pair_subtraction:
        return readout(phases, sensor, 1, rng)
    n = 2 * (len(phases) // 2)
    polarity = np.tile([1.0, -1.0], n // 2)
    values = readout(phases[:n], sensor, polarity, rng)
    return values[1::2] - values[0::2]


def run_sr(sample: SampleModel, protocol: SRProtocol, sensor: SensorModel, seed,
           jitter_s: float = 0.0, record: Optional[PhaseRecord] = None) -> SRTimeSeries:
    """
    Simulate one SR record.

    `record` may carry a precomputed phase record for the same sample lines,
    protocol and sensor (the residual modulation is applied here).
    """
    ss = _seed_sequence(seed)
    readout_ss, field_ss = ss.spawn(2)
    field_rng = np.random.default_rng(field_ss)

    if jitter_s > 0:
        jitter = np.rint(field_rng.normal(0.0, jitter_s * protocol.clock_hz, protocol.n_iterations))
        record = phase_record(sample, protocol, sensor, jitter.astype(np.int64))
    elif record is None:
        record = phase_record(sample, protocol, sensor)

    phases = record.phases(sample.residual)
    if sample.field_noise is not None:
        phases = phases + record.in_band * sample.field_noise.sample(record.times, field_rng)

    values = _readout_series(phases, sensor, np.random.default_rng(readout_ss))
    dt = 2.0 * protocol.tau_sr if sensor.pair_subtraction else protocol.tau_sr
    return SRTimeSeries(
        samples=values, dt=dt, protocol=protocol, seed=int(ss.entropy),
        n_averages=1, start_time=float(record.times[0]),
        pair_subtracted=sensor.pair_subtraction,
    )


def average_runs(runs: Sequence[SRTimeSeries]) -> SRTimeSeries:
    """Pointwise mean of runs sharing protocol, dt and length."""
    if not runs:
        raise SeriesMismatchError("average_runs needs at least one series")
    first = runs[0]
    for other in runs[1:]:
        if other.protocol != first.protocol:
            raise SeriesMismatchError("cannot average series recorded with different protocols")
        if other.dt != first.dt or len(other) != len(first) or other.pair_subtracted != first.pair_subtracted:
            raise SeriesMismatchError("cannot average series with different sampling")
    weights = np.array([r.n_averages for r in runs], dtype=float)
    stacked = np.stack([r.samples for r in runs])
    mean = (weights @ stacked) / weights.sum()
    return replace(first, samples=mean, n_averages=int(weights.sum()))


def average_series(sample: SampleModel, protocol: SRProtocol, sensor: SensorModel, seed: int,
                   n_averages: int, residuals: Optional[Sequence[Optional[ResidualModulation]]] = None,
                   jitter_s: float = 0.0) -> SRTimeSeries:
    """
    Average of `n_averages` runs with split seeds.

    Equivalent to average_runs over run_sr calls seeded with
    SeedSequence(seed).spawn(n_averages); the deterministic phase record is
    computed once.
    """
    if n_averages < 1:
        raise ConfigurationError(f"n_averages must be >= 1, got {n_averages}")
    if residuals is not None and len(residuals) != n_averages:
        raise ConfigurationError("need one residual modulation per average")
    children = np.random.SeedSequence(seed).spawn(n_averages)
    record = None if jitter_s > 0 else phase_record(sample, protocol, sensor)
    runs = []
    for j, child in enumerate(children):
        run_sample = sample if residuals is None else replace(sample, residual=residuals[j])
        runs.append(run_sr(run_sample, protocol, sensor, child, jitter_s=jitter_s, record=record))
    return average_runs(runs)


# ─── Noise floor ───

def measure_noise_floor(sensor: SensorModel, protocol: SRProtocol, seed: int,
                        duration: float = 1.0, n_averages: int = 1) -> float:
    """
    Monte-Carlo noise density (T/√Hz) from a signal-free record of `duration` seconds.

    Spectrum baseline RMS (DC and Nyquist bins excluded) converted to the
    amplitude of a tone with the same peak, scaled by √T.
    With n_averages > 1 the record is the average of that many runs.
    """
    n_iter = 2 * max(2, int(round(duration / protocol.tau_sr / 2)))
    silent = SampleModel((SpectralLine(protocol.f0_grid, 0.0),))
    series = average_series(silent, protocol.with_iterations(n_iter), sensor, seed, n_averages)
    x = series.samples - series.samples.mean()
    mags = np.abs(np.fft.rfft(x))[1:-1]
    rms = math.sqrt(float(np.mean(mags ** 2)))
    amplitude = 2.0 * rms / len(x)
    return amplitude / series_slope(sensor, protocol.subsequence) * math.sqrt(series.duration)
