"""Spectral analysis: preprocessing, periodogram, lineshape fitting, calibration."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from lmfit import Minimizer, Parameters
from scipy import signal, special, stats

from app.errors import SimulationError
from app.signal_model import FWHM_PER_SIGMA
from app.sr_engine import SRTimeSeries

logger = logging.getLogger(__name__)

MODELS = ("lorentzian", "gaussian")
DEFAULT_DISCARD = 20
# Rss values closer than this (relative) count as a tie, resolved to lorentzian
MODEL_TIE = 0.01
FIT_TOLERANCE = 1e-10

# |FT| FWHM divided by the line FWHM, per family (for initial guesses)
_MAGNITUDE_WIDTH_RATIO = {"lorentzian": math.sqrt(3.0), "gaussian": 1.79}


class AnalysisError(SimulationError):
    """Raised when a series or spectrum does not meet an analysis precondition."""
    pass


class FitError(SimulationError):
    """Raised when a lineshape fit does not converge."""

    def __init__(self, message: str, best_params: Optional[dict] = None):
        super().__init__(message)
        self.best_params = best_params or {}


class CalibrationError(SimulationError):
    """Raised when signal and reference peaks cannot be compared."""
    pass


# ─── Types ───

@dataclass(frozen=True, eq=False)
class Spectrum:
    frequencies: np.ndarray   # Hz, offsets from f0
    magnitudes: np.ndarray    # |FT|
    df: float
    n_samples: int            # kept samples before padding
    n_fft: int
    t_start: float = 0.0      # s, time of the first kept sample
    duration: float = 0.0     # s, kept record length

    def __len__(self) -> int:
        return len(self.frequencies)

    def band(self, window: Optional[tuple[float, float]]) -> "Spectrum":
        if window is None:
            return self
        lo, hi = window
        mask = (self.frequencies >= lo) & (self.frequencies <= hi)
        return replace(self, frequencies=self.frequencies[mask], magnitudes=self.magnitudes[mask])


@dataclass(frozen=True)
class PeakFit:
    center: float             # Hz
    fwhm: float               # Hz, width of the underlying line
    amplitude: float          # peak magnitude above baseline


@dataclass(frozen=True, eq=False)
class LineshapeFit:
    model: str
    peaks: tuple[PeakFit, ...]
    baseline: float
    rss: float
    rss_by_model: dict = field(default_factory=dict)
    window: Optional[tuple[float, float]] = None

    def evaluate(self, frequencies: np.ndarray) -> np.ndarray:
        shape = LINESHAPES[self.model]
        out = np.full_like(np.asarray(frequencies, dtype=float), self.baseline)
        for peak in self.peaks:
            out = out + shape(frequencies, peak.amplitude, peak.center, peak.fwhm)
        return out

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "baseline": self.baseline,
            "rss": self.rss,
            "rss_by_model": dict(self.rss_by_model),
            "peaks": [
                {"center_hz": p.center, "fwhm_hz": p.fwhm, "amplitude": p.amplitude}
                for p in self.peaks
            ],
        }


@dataclass(frozen=True)
class PeakWidth:
    fwhm: float
    spread: float             # standard deviation over repeats (0 for a single fit)


# ─── Lineshapes (magnitude mode) ───
#
# A real line at +center also has an image at -center; both tails add in the
# complex spectrum before the magnitude is taken.

def _lorentzian_complex(offset, fwhm):
    return 1.0 / (1.0 + 2j * offset / fwhm)


def _gaussian_complex(offset, fwhm):
    sigma = fwhm / FWHM_PER_SIGMA
    return special.wofz(-offset / (math.sqrt(2.0) * sigma))


def lorentzian_magnitude(f, amplitude, center, fwhm):
    """|FT| of an exponentially decaying line of absorption FWHM `fwhm`, image included."""
    f = np.asarray(f, dtype=float)
    return amplitude * np.abs(_lorentzian_complex(f - center, fwhm) + _lorentzian_complex(f + center, fwhm))


def gaussian_magnitude(f, amplitude, center, fwhm):
    """|FT| of a Gaussian-decaying line of absorption FWHM `fwhm` (Faddeeva form), image included."""
    f = np.asarray(f, dtype=float)
    return amplitude * np.abs(_gaussian_complex(f - center, fwhm) + _gaussian_complex(f + center, fwhm))


LINESHAPES = {"lorentzian": lorentzian_magnitude, "gaussian": gaussian_magnitude}


# ─── Preprocessing and periodogram ───

def preprocess(series: SRTimeSeries, discard: int = DEFAULT_DISCARD) -> SRTimeSeries:
    """Drop the first `discard` points and subtract the mean of the rest."""
    if discard < 0:
        raise AnalysisError(f"discard must be >= 0, got {discard}")
    if len(series) <= discard:
        raise AnalysisError(f"series of length {len(series)} is too short to discard {discard} points")
    kept = np.asarray(series.samples[discard:], dtype=float)
    return replace(
        series,
        samples=kept - kept.mean(),
        start_time=series.start_time + discard * series.dt,
    )


def periodogram(series: SRTimeSeries, zero_pad: int = 1) -> Spectrum:
    """|rfft| of the series; bin k sits at k/(n_fft·dt)."""
    if zero_pad < 1:
        raise AnalysisError(f"zero_pad must be >= 1, got {zero_pad}")
    x = np.asarray(series.samples, dtype=float)
    n_fft = zero_pad * len(x)
    magnitudes = np.abs(np.fft.rfft(x, n_fft))
    df = 1.0 / (n_fft * series.dt)
    return Spectrum(
        frequencies=np.arange(len(magnitudes)) * df,
        magnitudes=magnitudes,
        df=df,
        n_samples=len(x),
        n_fft=n_fft,
        t_start=series.start_time,
        duration=len(x) * series.dt,
    )


def parseval_residual(series: SRTimeSeries, spec: Spectrum) -> float:
    """Relative mismatch between Σ|X|²/n_fft (full two-sided spectrum) and Σx²."""
    mags2 = spec.magnitudes ** 2
    two_sided = mags2[0] + 2.0 * mags2[1:].sum()
    if spec.n_fft % 2 == 0:
        two_sided -= mags2[-1]
    energy = float(np.sum(np.asarray(series.samples, dtype=float) ** 2))
    if energy == 0:
        return float(abs(two_sided))
    return float(abs(two_sided / spec.n_fft - energy) / energy)


# ─── Fitting ───

def _evaluate(params, freqs, shape, n_peaks):
    out = np.full_like(freqs, params["baseline"].value)
    for i in range(n_peaks):
        out = out + shape(
            freqs,
            params[f"p{i}_amplitude"].value,
            params[f"p{i}_center"].value,
            params[f"p{i}_fwhm"].value,
        )
    return out


def _residual(params, freqs, shape, n_peaks, data=None):
    model = _evaluate(params, freqs, shape, n_peaks)
    if data is None:
        return model
    return model - data


def _initial_guesses(freqs: np.ndarray, data: np.ndarray, n_peaks: int, df: float) -> list[tuple]:
    """(center, |FT| width, height) from the most prominent local maxima."""
    peaks, props = signal.find_peaks(data, prominence=0.0)
    base = float(np.median(data))
    if len(peaks) == 0:
        peaks = np.array([int(np.argmax(data))])
        props = {"prominences": np.array([data[peaks[0]] - base])}
    order = np.argsort(props["prominences"])[::-1][:n_peaks]
    chosen = np.sort(peaks[order])
    widths = signal.peak_widths(data, chosen, rel_height=0.5)[0] * df
    guesses = [
        (float(freqs[p]), float(max(w, df)), float(max(data[p] - base, 0.0)))
        for p, w in zip(chosen, widths)
    ]
    # Not enough maxima (merged lines): spread the missing guesses around the tallest
    while len(guesses) < n_peaks:
        c, w, h = max(guesses, key=lambda g: g[2])
        k = len(guesses)
        offset = (0.5 if k % 2 else -0.5) * w * (1 + k // 2)
        guesses.append((c + offset, w, 0.5 * h))
    return sorted(guesses)


def _fit_family(model: str, freqs: np.ndarray, data: np.ndarray, guesses: Sequence[tuple],
                baseline: float, df: float):
    shape = LINESHAPES[model]
    ratio = _MAGNITUDE_WIDTH_RATIO[model]
    lo, hi = float(freqs[0]), float(freqs[-1])
    span = hi - lo
    params = Parameters()
    for i, (center, width_mag, height) in enumerate(guesses):
        fwhm = min(max(width_mag / ratio, df / 10.0), span)
        reach = 3.0 * width_mag + df
        params.add(f"p{i}_center", value=min(max(center, lo), hi),
                   min=max(lo, center - reach), max=min(hi, center + reach))
        params.add(f"p{i}_fwhm", value=fwhm, min=df / 20.0, max=max(span, 2.0 * fwhm))
        params.add(f"p{i}_amplitude", value=max(height, 1e-6), min=0.0)
    params.add("baseline", value=baseline)

    minimizer = Minimizer(_residual, params, fcn_args=(freqs, shape, len(guesses)), fcn_kws={"data": data})
    result = minimizer.leastsq(max_nfev=500 * (len(params) + 1), ftol=FIT_TOLERANCE, xtol=FIT_TOLERANCE)
    rss = float(np.sum(result.residual ** 2))
    return result, rss


def fit_peaks(spec: Spectrum, n_peaks: int, init: Optional[Sequence[Sequence[float]]] = None,
              model: str = "auto", window: Optional[tuple[float, float]] = None) -> LineshapeFit:
    """
    Least-squares fit of `n_peaks` magnitude-mode lines plus a constant baseline.

    model="auto" fits both families and keeps the smaller rss (ties go to
    lorentzian). `init` holds (center, fwhm[, amplitude]) per peak.
    """
    if n_peaks < 1:
        raise AnalysisError(f"n_peaks must be >= 1, got {n_peaks}")
    if model not in MODELS + ("auto",):
        raise AnalysisError(f"model must be auto or one of {MODELS}, got {model!r}")
    sub = spec.band(window)
    min_bins = 5 * (3 * n_peaks + 1)
    if len(sub) < min_bins:
        raise AnalysisError(f"fit needs >= {min_bins} bins for {n_peaks} peak(s), got {len(sub)}")

    freqs = np.asarray(sub.frequencies, dtype=float)
    scale = float(np.max(np.abs(sub.magnitudes))) or 1.0
    data = np.asarray(sub.magnitudes, dtype=float) / scale
    baseline0 = float(np.median(data))

    families = MODELS if model == "auto" else (model,)
    results = {}
    for family in families:
        if init is not None:
            if len(init) != n_peaks:
                raise AnalysisError(f"init has {len(init)} guesses for {n_peaks} peak(s)")
            ratio = _MAGNITUDE_WIDTH_RATIO[family]
            guesses = []
            for g in init:
                height = g[2] / scale if len(g) > 2 else float(np.interp(g[0], freqs, data)) - baseline0
                guesses.append((float(g[0]), float(g[1]) * ratio, height))
        else:
            guesses = _initial_guesses(freqs, data, n_peaks, sub.df)
        result, rss = _fit_family(family, freqs, data, guesses, baseline0, sub.df)
        results[family] = (result, rss)
        logger.debug(f"{family} fit: rss={rss * scale ** 2:.4e} nfev={result.nfev} success={result.success}")

    converged = {k: v for k, v in results.items() if v[0].success}
    if not converged:
        best_family = min(results, key=lambda k: results[k][1])
        best = results[best_family][0]
        raise FitError(
            f"{best_family} fit did not converge after {best.nfev} evaluations: {best.message}",
            best_params={name: p.value for name, p in best.params.items()},
        )
    for family in results.keys() - converged.keys():
        logger.warning(f"{family} fit did not converge; using the remaining family")

    chosen = min(converged, key=lambda k: converged[k][1])
    if "lorentzian" in converged and chosen != "lorentzian":
        rss_l = converged["lorentzian"][1]
        if rss_l - converged[chosen][1] < MODEL_TIE * converged[chosen][1]:
            chosen = "lorentzian"

    params = converged[chosen][0].params
    peaks = sorted(
        (
            PeakFit(
                center=params[f"p{i}_center"].value,
                fwhm=params[f"p{i}_fwhm"].value,
                amplitude=params[f"p{i}_amplitude"].value * scale,
            )
            for i in range(n_peaks)
        ),
        key=lambda p: p.center,
    )
    return LineshapeFit(
        model=chosen,
        peaks=tuple(peaks),
        baseline=params["baseline"].value * scale,
        rss=converged[chosen][1] * scale ** 2,
        rss_by_model={k: v[1] * scale ** 2 for k, v in results.items()},
        window=window,
    )


# ─── Derived quantities ───

def fwhm_report(fits) -> list[PeakWidth]:
    """FWHM per peak; with several fits (one per seed) the spread is their std."""
    if isinstance(fits, LineshapeFit):
        fits = [fits]
    if not fits:
        raise AnalysisError("fwhm_report needs at least one fit")
    n_peaks = len(fits[0].peaks)
    if any(len(f.peaks) != n_peaks for f in fits):
        raise AnalysisError("fits disagree on the number of peaks")
    report = []
    for i in range(n_peaks):
        widths = np.array([f.peaks[i].fwhm for f in fits])
        spread = float(np.std(widths, ddof=1)) if len(widths) > 1 else 0.0
        report.append(PeakWidth(fwhm=float(widths.mean()), spread=spread))
    return report


def peak_splitting(fit: LineshapeFit) -> float:
    """Separation of the outermost fitted peaks (Hz)."""
    if len(fit.peaks) < 2:
        raise AnalysisError("splitting needs at least two peaks")
    return fit.peaks[-1].center - fit.peaks[0].center


def peak_intensity_ratio(fit: LineshapeFit, i: int = 0, j: int = 1) -> float:
    """Intensity ratio of peaks i and j in power units, (h_i/h_j)²."""
    hi, hj = fit.peaks[i].amplitude, fit.peaks[j].amplitude
    if hj == 0:
        raise AnalysisError("reference peak has zero amplitude")
    return (hi / hj) ** 2


def window_constant(model: str = "lorentzian", zero_pad: int = 8, window_bins: float = 3.0,
                    cycles: float = 50.25, duration: float = 1.0, dt: float = 1e-3) -> float:
    """
    c = FWHM·T of the fitted main lobe of a noiseless undamped tone.

    The tone sits `cycles` cycles into the record, so results at any T with the
    same `cycles` scale as c/T.
    """
    n = int(round(duration / dt))
    t = np.arange(n) * dt
    tone = SRTimeSeries(samples=np.cos(2.0 * np.pi * (cycles / duration) * t), dt=dt, protocol=None)
    fit = fit_tone(tone, model=model, zero_pad=zero_pad, window_bins=window_bins)
    return fit.peaks[0].fwhm * duration


def fit_tone(series: SRTimeSeries, model: str = "lorentzian", zero_pad: int = 8,
             window_bins: float = 3.0, discard: int = 0) -> LineshapeFit:
    """Single-peak fit around the strongest bin, window ±window_bins/T."""
    spec = periodogram(preprocess(series, discard), zero_pad=zero_pad)
    peak = float(spec.frequencies[int(np.argmax(spec.magnitudes[1:])) + 1])
    half = window_bins / spec.duration
    return fit_peaks(spec, 1, model=model, window=(max(0.0, peak - half), peak + half))


def peak_height(spec: Spectrum, center: float, reach: int = 2) -> float:
    """Largest magnitude within `reach` bins of `center`."""
    idx = int(round((center - spec.frequencies[0]) / spec.df))
    lo = max(0, idx - reach)
    hi = min(len(spec), idx + reach + 1)
    if lo >= hi:
        raise CalibrationError(f"peak at {center} Hz lies outside the spectrum")
    return float(np.max(spec.magnitudes[lo:hi]))


def effective_duration(t2: float, start: float, stop: float) -> float:
    """∫ e^(−t/t2) dt over [start, stop]; stop − start for an undamped signal."""
    if stop <= start:
        raise CalibrationError(f"empty signal window [{start}, {stop}]")
    if math.isinf(t2):
        return stop - start
    return t2 * (math.exp(-start / t2) - math.exp(-stop / t2))


def calibrate_amplitude(spec: Spectrum, signal_peak: PeakFit, reference_peak: PeakFit,
                        reference_amplitude: float, reference_duration: float, signal_t2: float,
                        signal_window: Optional[tuple[float, float]] = None) -> float:
    """
    Signal amplitude (T) from the peak-intensity ratio to a calibrated reference.

    A_sig = A_ref · (h_sig / h_ref) · (τ_ref / T_eff), with T_eff the
    integrated signal envelope over the analysed window.
    """
    separation = abs(signal_peak.center - reference_peak.center)
    if separation < signal_peak.fwhm + reference_peak.fwhm:
        raise CalibrationError(
            f"peaks overlap: separation {separation:.2f} Hz < summed FWHM "
            f"{signal_peak.fwhm + reference_peak.fwhm:.2f} Hz"
        )
    if not reference_duration > 0:
        raise CalibrationError("reference duration must be > 0")
    if signal_window is None:
        signal_window = (spec.t_start, spec.t_start + spec.duration)
    t_eff = effective_duration(signal_t2, *signal_window)
    h_sig = peak_height(spec, signal_peak.center)
    h_ref = peak_height(spec, reference_peak.center)
    if h_ref <= 0:
        raise CalibrationError("reference peak has zero height")
    return reference_amplitude * (h_sig / h_ref) * (reference_duration / t_eff)


def gyromagnetic_fit(points: Sequence[tuple[float, float]]) -> dict:
    """Ordinary least squares of fitted centre (Hz) against b0 (T)."""
    b0 = np.array([p[0] for p in points], dtype=float)
    centers = np.array([p[1] for p in points], dtype=float)
    if len(np.unique(b0)) < 2:
        raise AnalysisError("gyromagnetic fit needs at least two distinct b0 values")
    reg = stats.linregress(b0, centers)
    return {
        "slope": float(reg.slope),
        "intercept": float(reg.intercept),
        "slope_stderr": float(reg.stderr) if len(points) > 2 else 0.0,
    }
