"""NV response: toggling-function phase, readout transfer, shot noise, sensitivity."""

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from app.constants import CONSTANTS
from app.errors import ConfigurationError

logger = logging.getLogger(__name__)

SEQUENCE_FAMILIES = ("XY8", "CPMG")
READOUT_MODES = ("ensemble-gaussian", "single-shot-poisson")

# Gauss-Legendre nodes per toggling segment
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


# ─── Types ───

@dataclass(frozen=True)
class PulseSequenceSpec:
    family: str               # XY8 | CPMG
    repetitions: int
    pulse_spacing: float      # s, π-pulse centre spacing (= 1/(2·f0))
    rabi_frequency: float     # Hz

    def __post_init__(self):
        if self.family not in SEQUENCE_FAMILIES:
            raise ConfigurationError(f"sequence family must be one of {SEQUENCE_FAMILIES}, got {self.family!r}")
        if self.repetitions < 1:
            raise ConfigurationError(f"repetitions must be >= 1, got {self.repetitions}")
        if not self.rabi_frequency > 0:
            raise ConfigurationError(f"rabi_frequency must be > 0, got {self.rabi_frequency}")
        if not self.pulse_spacing > self.pi_duration:
            raise ConfigurationError(
                f"pulse spacing {self.pulse_spacing:.3e} s must exceed the π duration {self.pi_duration:.3e} s"
            )

    @classmethod
    def for_frequency(cls, family: str, repetitions: int, f0: float, rabi_frequency: float) -> "PulseSequenceSpec":
        return cls(family, repetitions, 1.0 / (2.0 * f0), rabi_frequency)

    @property
    def n_pulses(self) -> int:
        return 8 * self.repetitions if self.family == "XY8" else self.repetitions

    @property
    def pi_duration(self) -> float:
        return 1.0 / (2.0 * self.rabi_frequency)

    @property
    def pi_half_duration(self) -> float:
        return 1.0 / (4.0 * self.rabi_frequency)

    @property
    def duration(self) -> float:
        """T_seq: N pulse spacings, π pulses centred at odd half-spacings."""
        return self.n_pulses * self.pulse_spacing

    @property
    def center_frequency(self) -> float:
        return 1.0 / (2.0 * self.pulse_spacing)

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Toggling segment bounds (N+2 edges) and signs, starting at +1."""
        centers = (np.arange(self.n_pulses) + 0.5) * self.pulse_spacing
        edges = np.concatenate(([0.0], centers, [self.duration]))
        signs = np.where(np.arange(self.n_pulses + 1) % 2 == 0, 1.0, -1.0)
        return edges, signs

    @property
    def label(self) -> str:
        return f"{self.family}-{self.repetitions}"


@dataclass(frozen=True)
class SensorModel:
    contrast: float = 0.07
    photons_per_readout: float = 6.0e7
    readout_mode: str = "ensemble-gaussian"
    gyromagnetic_nv: float = CONSTANTS.gamma_nv_freq
    pair_subtraction: bool = True
    baseline: float = 1.0

    def __post_init__(self):
        if not 0 < self.contrast < 1:
            raise ConfigurationError(f"contrast must be in (0, 1), got {self.contrast}")
        if not self.photons_per_readout > 0:
            raise ConfigurationError(f"photons_per_readout must be > 0, got {self.photons_per_readout}")
        if self.readout_mode not in READOUT_MODES:
            raise ConfigurationError(f"readout_mode must be one of {READOUT_MODES}, got {self.readout_mode!r}")


SENSOR_PRESETS = {
    # ≈ 50 pT/√Hz with XY8-6 at 3.74 MHz and τ_SR = 24.06 μs
    "paper-ensemble": SensorModel(
        contrast=0.07, photons_per_readout=6.0e7,
        readout_mode="ensemble-gaussian", pair_subtraction=True,
    ),
    "paper-single-nv": SensorModel(
        contrast=0.3, photons_per_readout=0.03,
        readout_mode="single-shot-poisson", pair_subtraction=False,
    ),
}


def sensor_preset(name: str) -> SensorModel:
    try:
        return SENSOR_PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown sensor preset {name!r}; expected one of {', '.join(SENSOR_PRESETS)}")


# ─── Phase accumulation ───

def toggling_phase(field: Callable[[np.ndarray], np.ndarray], seq: PulseSequenceSpec,
                   t0: float = 0.0, gyromagnetic: float = CONSTANTS.gamma_nv_freq) -> float:
    """
    Phase 2π·γ·∫B(t)·s(t)dt over [t0, t0 + T_seq].

    `field` takes an array of absolute times (s) and returns tesla.
    π pulses are instantaneous sign flips of s(t).
    """
    edges, signs = seq.segments()
    a = t0 + edges[:-1]
    b = t0 + edges[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    values = np.asarray(field(nodes), dtype=float)
    integral = np.sum(signs * half * (values @ _GL_WEIGHTS))
    return float(2.0 * np.pi * gyromagnetic * integral)


def filter_response(seq: PulseSequenceSpec, frequency, decay_rate: float = 0.0):
    """
    Complex response Σ_k s_k ∫ e^{λt} dt with λ = i2πf − decay_rate, t from the window start.

    For B(t) = Re[A·e^{iθ}·e^{λt}] the accumulated phase is 2π·γ·Re[A·e^{iθ}·F].
    """
    edges, signs = seq.segments()
    freq = np.asarray(frequency, dtype=float)
    lam = 1j * 2.0 * np.pi * freq[..., None] - decay_rate
    a = edges[:-1]
    b = edges[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (np.exp(lam * b) - np.exp(lam * a)) / lam
    terms = np.where(np.abs(lam) < 1e-300, (b - a) + 0j, terms)
    out = terms @ signs
    return complex(out) if np.ndim(frequency) == 0 else out


def two_pi_field(f: float, n_pulses: int) -> float:
    """Resonant amplitude that accumulates 2π of phase: 2ħπ²f/(g·μ_B·N)."""
    if not f > 0 or n_pulses < 1:
        raise ConfigurationError("two_pi_field needs f > 0 and n_pulses >= 1")
    return 2.0 * CONSTANTS.hbar * math.pi ** 2 * f / (CONSTANTS.g_nv * CONSTANTS.mu_b * n_pulses)


def phase_slope(sensor: SensorModel, seq: PulseSequenceSpec) -> float:
    """dφ/dB (rad/T) for an optimally phased field at the sequence centre frequency."""
    return 2.0 * math.pi * sensor.gyromagnetic_nv * abs(filter_response(seq, seq.center_frequency))


def pulse_on_fraction(seq: PulseSequenceSpec, tau_sr: float) -> float:
    """Fraction of the SR cycle with microwaves on (π pulses plus both π/2 pulses)."""
    return (seq.n_pulses * seq.pi_duration + 2.0 * seq.pi_half_duration) / tau_sr


# ─── Readout ───

def readout(phase, sensor: SensorModel, polarity=1, seed=None):
    """
    Fluorescence sample(s) for the given phase(s) and final-π/2 polarity.

    Mean: baseline·(1 − (contrast/2)·(1 + polarity·sin φ)).
    `seed` may be an int, a SeedSequence or a Generator.
    """
    rng = np.random.default_rng(seed)
    phase = np.asarray(phase, dtype=float)
    polarity = np.asarray(polarity, dtype=float)
    mean = sensor.baseline * (1.0 - 0.5 * sensor.contrast * (1.0 + polarity * np.sin(phase)))
    scale = sensor.photons_per_readout
    if sensor.readout_mode == "single-shot-poisson":
        sample = rng.poisson(scale * mean / sensor.baseline) * (sensor.baseline / scale)
    else:
        sample = mean + rng.standard_normal(np.shape(mean)) * np.sqrt(mean * sensor.baseline / scale)
    return float(sample) if np.ndim(sample) == 0 else sample


def readout_noise_std(sensor: SensorModel) -> float:
    """Per-readout standard deviation at zero phase."""
    mean0 = sensor.baseline * (1.0 - 0.5 * sensor.contrast)
    return math.sqrt(mean0 * sensor.baseline / sensor.photons_per_readout)


def sensitivity_estimate(sensor: SensorModel, tau_sr: float, seq: PulseSequenceSpec) -> float:
    """
    Closed-form field noise density (T/√Hz).

    Expressed as the amplitude of a tone whose periodogram peak equals the
    baseline RMS of a 1 s record: 2·σ_sample·√dt / slope.
    """
    sigma = readout_noise_std(sensor)
    slope = sensor.baseline * sensor.contrast * phase_slope(sensor, seq)
    if sensor.pair_subtraction:
        sigma *= math.sqrt(2.0)
        dt = 2.0 * tau_sr
    else:
        slope *= 0.5
        dt = tau_sr
    return 2.0 * sigma * math.sqrt(dt) / slope


def series_slope(sensor: SensorModel, seq: PulseSequenceSpec) -> float:
    """Series units per tesla for an on-resonance, optimally phased field."""
    slope = sensor.baseline * sensor.contrast * phase_slope(sensor, seq)
    return slope if sensor.pair_subtraction else 0.5 * slope
