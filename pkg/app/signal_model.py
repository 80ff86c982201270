"""Synthetic magnetic signals: FID lines, antenna tones, isochromat ensembles, π-pulse echoes."""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from app.constants import CONSTANTS
from app.errors import ConfigurationError

logger = logging.getLogger(__name__)

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
ENSEMBLE_KINDS = ("lorentzian", "gaussian")
NOISE_KINDS = ("white", "random-walk")
NAMED_SAMPLES = ("glycerol", "water", "tmp", "xylene", "three-tone-antenna")

# Isochromat chunk size for coherence sums (rows × isochromats kept under ~32 MB)
_CHUNK_ELEMENTS = 4_000_000


# ─── Types ───

@dataclass(frozen=True)
class SpectralLine:
    frequency: float          # Hz
    amplitude: float          # T, zero-to-peak
    phase0: float = 0.0       # rad
    t2: float = math.inf      # s
    gate_start: Optional[float] = None
    gate_stop: Optional[float] = None

    def __post_init__(self):
        if not self.frequency > 0:
            raise ConfigurationError(f"line frequency must be > 0, got {self.frequency}")
        if self.amplitude < 0:
            raise ConfigurationError(f"line amplitude must be >= 0, got {self.amplitude}")
        if not self.t2 > 0:
            raise ConfigurationError(f"line t2 must be > 0 or inf, got {self.t2}")
        if (self.gate_start is None) != (self.gate_stop is None):
            raise ConfigurationError("gate needs both start and stop")
        if self.gate_start is not None and not 0 <= self.gate_start < self.gate_stop:
            raise ConfigurationError(f"invalid gate [{self.gate_start}, {self.gate_stop})")

    @property
    def gated(self) -> bool:
        return self.gate_start is not None

    def envelope(self, t: np.ndarray) -> np.ndarray:
        """Homogeneous decay times the gate window."""
        env = np.ones_like(t) if math.isinf(self.t2) else np.exp(-t / self.t2)
        if self.gated:
            env = np.where((t >= self.gate_start) & (t < self.gate_stop), env, 0.0)
        return env


@dataclass(frozen=True)
class IsochromatEnsemble:
    """Static offset distribution sampled at deterministic quantiles, equal weights."""

    kind: str = "lorentzian"
    width: float = 0.0        # Hz, FWHM
    n_isochromats: int = 4096

    def __post_init__(self):
        if self.kind not in ENSEMBLE_KINDS:
            raise ConfigurationError(f"ensemble kind must be one of {ENSEMBLE_KINDS}, got {self.kind!r}")
        if self.width < 0:
            raise ConfigurationError(f"ensemble width must be >= 0, got {self.width}")
        if self.n_isochromats < 1:
            raise ConfigurationError(f"n_isochromats must be >= 1, got {self.n_isochromats}")

    @cached_property
    def offsets(self) -> np.ndarray:
        u = (np.arange(self.n_isochromats) + 0.5) / self.n_isochromats
        if self.width == 0:
            return np.zeros(self.n_isochromats)
        if self.kind == "lorentzian":
            return 0.5 * self.width * np.tan(np.pi * (u - 0.5))
        return (self.width / FWHM_PER_SIGMA) * stats.norm.ppf(u)

    @cached_property
    def weights(self) -> np.ndarray:
        return np.full(self.n_isochromats, 1.0 / self.n_isochromats)

    def coherence(self, tau: np.ndarray) -> np.ndarray:
        """Σ_m w_m cos(2π δ_m τ) for every offset time τ."""
        tau = np.asarray(tau, dtype=float)
        flat = tau.ravel()
        if self.width == 0:
            return np.ones_like(tau)
        out = np.empty_like(flat)
        rows = max(1, _CHUNK_ELEMENTS // self.n_isochromats)
        two_pi_offsets = 2.0 * np.pi * self.offsets
        for start in range(0, flat.size, rows):
            block = flat[start:start + rows]
            out[start:start + rows] = np.cos(np.outer(block, two_pi_offsets)) @ self.weights
        return out.reshape(tau.shape)


@dataclass(frozen=True)
class PiPulseSchedule:
    times: tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(x) for x in self.times)
        object.__setattr__(self, "times", times)
        if any(x < 0 for x in times):
            raise ConfigurationError("π-pulse times must be >= 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigurationError("π-pulse times must be strictly increasing")

    def offset_time(self, t: np.ndarray) -> np.ndarray:
        """Effective time for offset phase: negated at each π pulse, slope 1 between pulses."""
        t = np.asarray(t, dtype=float)
        if not self.times:
            return t.copy()
        p = np.asarray(self.times)
        after = np.empty_like(p)
        prev_time, prev_tau = 0.0, 0.0
        for j, pj in enumerate(p):
            after[j] = -(prev_tau + (pj - prev_time))
            prev_time, prev_tau = pj, after[j]
        k = np.searchsorted(p, t, side="right")
        tau = t.copy()
        flipped = k > 0
        idx = k[flipped] - 1
        tau[flipped] = after[idx] + (t[flipped] - p[idx])
        return tau


@dataclass(frozen=True)
class FieldNoise:
    kind: str
    sigma: float              # T (white) or T/√s (random-walk)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"field noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.sigma < 0:
            raise ConfigurationError(f"field noise sigma must be >= 0, got {self.sigma}")

    def sample(self, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "white":
            return rng.normal(0.0, self.sigma, size=t.shape)
        flat = t.ravel()
        steps = np.diff(flat, prepend=0.0)
        if np.any(steps < 0):
            raise ConfigurationError("random-walk noise needs non-decreasing times")
        walk = np.cumsum(rng.normal(0.0, 1.0, size=flat.shape) * self.sigma * np.sqrt(steps))
        return walk.reshape(t.shape)


@dataclass(frozen=True, eq=False)
class ResidualModulation:
    """Common phase modulation M(t) shared by all lines (field-lock residual)."""

    times: np.ndarray
    phase: np.ndarray         # rad

    def __post_init__(self):
        if len(self.times) != len(self.phase) or len(self.times) < 2:
            raise ConfigurationError("residual modulation needs matching arrays of length >= 2")

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def at(self, t: np.ndarray) -> np.ndarray:
        return np.interp(t, self.times, self.phase)


@dataclass(frozen=True)
class SampleModel:
    lines: tuple[SpectralLine, ...]
    ensemble: Optional[IsochromatEnsemble] = None
    pi_schedule: Optional[PiPulseSchedule] = None
    field_noise: Optional[FieldNoise] = None
    residual: Optional[ResidualModulation] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        if not self.lines:
            raise ConfigurationError("sample needs at least one line")

    def offset_time(self, t: np.ndarray) -> np.ndarray:
        if self.pi_schedule is None:
            return np.asarray(t, dtype=float)
        return self.pi_schedule.offset_time(t)

    def coherence(self, t: np.ndarray) -> np.ndarray:
        """Ensemble factor at each time (1 without an ensemble)."""
        if self.ensemble is None:
            return np.ones_like(np.asarray(t, dtype=float))
        return self.ensemble.coherence(self.offset_time(t))

    def residual_phase(self, t: np.ndarray) -> np.ndarray:
        if self.residual is None:
            return np.zeros_like(np.asarray(t, dtype=float))
        return self.residual.at(t)


# ─── Operations ───

def evaluate_field(model: SampleModel, t, seed: int = 0):
    """
    Evaluate B(t) in tesla at one or many times.

    Each line contributes A·e^(−t/t2)·Σ_m w_m cos(2πf t + 2πδ_m τ_eff(t) + φ0 + M(t)).
    Lines are summed in order from zero and the noise term is added last.
    """
    scalar = np.ndim(t) == 0
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise ValueError("evaluate_field needs t >= 0")

    modulation = model.residual_phase(t_arr)
    if model.ensemble is not None:
        two_pi_offsets = 2.0 * np.pi * model.ensemble.offsets
        tau = model.offset_time(t_arr)

    total = np.zeros_like(t_arr)
    for line in model.lines:
        env = line.amplitude * line.envelope(t_arr)
        carrier = 2.0 * np.pi * line.frequency * t_arr + line.phase0 + modulation
        if model.ensemble is None:
            total = total + env * np.cos(carrier)
            continue
        # cos(a + b) = cos a cos b − sin a sin b, with the ensemble sums taken over b
        cos_sum = np.empty_like(t_arr)
        sin_sum = np.empty_like(t_arr)
        rows = max(1, _CHUNK_ELEMENTS // model.ensemble.n_isochromats)
        for start in range(0, t_arr.size, rows):
            phase = np.outer(tau[start:start + rows], two_pi_offsets)
            cos_sum[start:start + rows] = np.cos(phase) @ model.ensemble.weights
            sin_sum[start:start + rows] = np.sin(phase) @ model.ensemble.weights
        total = total + env * (np.cos(carrier) * cos_sum - np.sin(carrier) * sin_sum)

    if model.field_noise is not None:
        rng = np.random.default_rng(seed)
        total = total + model.field_noise.sample(t_arr, rng)

    return float(total[0]) if scalar else total


def reference_pulse(frequency: float, amplitude: float, start: float, duration: float) -> SpectralLine:
    """Gated calibration tone switched on at `start` for `duration` seconds."""
    return SpectralLine(
        frequency=frequency, amplitude=amplitude,
        gate_start=start, gate_stop=start + duration,
    )


def build_named_sample(name: str, b0: float, line_scale: float,
                       n_isochromats: int = 4096) -> SampleModel:
    """
    Build one of the bundled physical samples.

    Line frequencies are absolute (Hz). Proton lines sit around γ_p·b0.
    """
    if not b0 > 0:
        raise ConfigurationError(f"b0 must be > 0, got {b0}")
    larmor = CONSTANTS.gamma_p_freq * b0

    if name == "tmp":
        # J-coupled doublet, 13 Hz
        lines = (
            SpectralLine(larmor - 6.5, line_scale),
            SpectralLine(larmor + 6.5, line_scale),
        )
        return SampleModel(lines, IsochromatEnsemble("lorentzian", 3.0, n_isochromats))
    if name == "xylene":
        # methyl (6) below aromatic (4), 20 Hz chemical-shift split
        lines = (
            SpectralLine(larmor - 10.0, 0.6 * line_scale),
            SpectralLine(larmor + 10.0, 0.4 * line_scale),
        )
        return SampleModel(lines, IsochromatEnsemble("gaussian", 6.0, n_isochromats))
    if name == "water":
        return SampleModel(
            (SpectralLine(larmor, line_scale, t2=0.5),),
            IsochromatEnsemble("lorentzian", 9.0, n_isochromats),
        )
    if name == "glycerol":
        return SampleModel(
            (SpectralLine(larmor, line_scale),),
            IsochromatEnsemble("lorentzian", 30.0, n_isochromats),
        )
    if name == "three-tone-antenna":
        center = 3.7325e6
        lines = tuple(SpectralLine(center + d, line_scale) for d in (-1.0, 0.0, 1.0))
        return SampleModel(lines)

    raise ConfigurationError(f"unknown sample {name!r}; expected one of {', '.join(NAMED_SAMPLES)}")


def with_lines(sample: SampleModel, extra: Sequence[SpectralLine]) -> SampleModel:
    """Return the sample with extra lines appended (e.g. a reference pulse)."""
    return replace(sample, lines=tuple(sample.lines) + tuple(extra))
