"""Optional SVG plots with deterministic output."""

import io
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "sr-magnetometry"
plt.rcParams["svg.fonttype"] = "none"


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def spectrum_svg(spec, fit=None, title: str = "") -> str:
    """Magnitude spectrum with the fitted curve over the fit window."""
    fig, ax = plt.subplots(figsize=(7, 4))
    freqs, mags = spec.frequencies, spec.magnitudes
    if fit is not None and fit.window is not None:
        lo, hi = fit.window
        pad = 0.5 * (hi - lo)
        mask = (freqs >= lo - pad) & (freqs <= hi + pad)
        freqs, mags = freqs[mask], mags[mask]
    ax.plot(freqs, mags, lw=0.8, color="0.3", label="|FT|")
    if fit is not None:
        dense = np.linspace(freqs[0], freqs[-1], 2000)
        ax.plot(dense, fit.evaluate(dense), lw=1.2, color="tab:red", label=f"{fit.model} fit")
    ax.set_xlabel("offset frequency (Hz)")
    ax.set_ylabel("magnitude")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    return _svg(fig)


def map_svg(bmap, title: str = "") -> str:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    extent = [bmap.x[0] * 1e6, bmap.x[-1] * 1e6, bmap.y[0] * 1e6, bmap.y[-1] * 1e6]
    vmax = float(np.max(np.abs(bmap.factor))) or 1.0
    image = ax.imshow(bmap.factor, origin="lower", extent=extent, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
    fig.colorbar(image, ax=ax, label="geometric factor")
    ax.set_xlabel("x (μm)")
    ax.set_ylabel("y (μm)")
    ax.set_title(title or f"z = {bmap.z * 1e6:.2f} μm")
    fig.tight_layout()
    return _svg(fig)


def lock_svg(lock, decimation: int = 1) -> str:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    sl = slice(None, None, decimation)
    ax.plot(lock.times[sl] / 60.0, lock.field_trace[sl] * 1e9, lw=0.5)
    ax.set_xlabel("time (min)")
    ax.set_ylabel("deviation (nT)")
    fig.tight_layout()
    return _svg(fig)
