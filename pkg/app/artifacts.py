"""Artifact codecs: CSV and npz series, spectra, fits, maps, lock traces, records."""

import csv
import io
import json
import logging
import zipfile
from pathlib import Path
from typing import Iterable, Optional

import aiofiles
import numpy as np

from app.errors import ConfigurationError
from app.sr_engine import SRTimeSeries

logger = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"
# Fixed member timestamp keeps npz bytes identical across runs
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


# ─── Writers ───

async def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "w", encoding="utf-8", newline="") as f:
        await f.write(text)
    return path


async def write_bytes(path: Path, data: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "wb") as f:
        await f.write(data)
    return path


async def write_json(path: Path, payload) -> Path:
    return await write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def _table(header: str, columns: Iterable[np.ndarray], fmt) -> str:
    buf = io.StringIO()
    np.savetxt(buf, np.column_stack(list(columns)), fmt=fmt, delimiter=",", header=header, comments="")
    return buf.getvalue()


def rows_csv(rows: list[dict], fieldnames: Optional[list[str]] = None) -> str:
    """CSV text for a list of flat dicts (union of keys, first-seen order)."""
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames.extend(k for k in row if k not in fieldnames)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})
    return buf.getvalue()


# ─── Series ───

def series_csv(series: SRTimeSeries) -> str:
    n = len(series)
    return _table("index,time_s,value", (np.arange(n), series.times, series.samples), ["%d", FLOAT_FMT, FLOAT_FMT])


def series_metadata(series: SRTimeSeries) -> dict:
    meta = {
        "dt": series.dt,
        "seed": series.seed,
        "n_averages": series.n_averages,
        "start_time": series.start_time,
        "pair_subtracted": series.pair_subtracted,
        **series.metadata,
    }
    p = series.protocol
    if p is not None:
        meta["protocol"] = {
            "f0": p.f0, "clock_hz": p.clock_hz, "period_ticks": p.period_ticks, "k": p.k,
            "n_iterations": p.n_iterations, "pulse_ticks": p.pulse_ticks, "start_ticks": p.start_ticks,
            "family": p.subsequence.family, "repetitions": p.subsequence.repetitions,
            "rabi_frequency": p.subsequence.rabi_frequency,
        }
    return meta


def series_npz(series: SRTimeSeries) -> bytes:
    """npz archive with `samples` and a JSON `metadata` entry, fixed member timestamps."""
    members = {
        "samples.npy": np.asarray(series.samples, dtype=float),
        "metadata.npy": np.array(json.dumps(series_metadata(series), sort_keys=True, default=_json_default)),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, array in members.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, array, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_EPOCH), member.getvalue())
    return buf.getvalue()


def read_series_csv(path: Path) -> SRTimeSeries:
    """Series from an `index,time_s,value` CSV; dt from the time column."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"cannot read series CSV {path}: {e}") from e
    if data.shape[1] != 3 or data.shape[0] < 2:
        raise ConfigurationError(f"{path}: expected columns index,time_s,value and at least 2 rows")
    times = data[:, 1]
    steps = np.diff(times)
    dt = float(np.mean(steps))
    if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise ConfigurationError(f"{path}: time column is not uniformly sampled")
    return SRTimeSeries(samples=data[:, 2], dt=dt, protocol=None, start_time=float(times[0]))


def read_series_npz(path: Path) -> tuple[np.ndarray, dict]:
    with np.load(path, allow_pickle=False) as archive:
        samples = archive["samples"]
        meta = json.loads(str(archive["metadata"]))
    return samples, meta


# ─── Spectra, fits, maps, traces ───

def spectrum_csv(spec) -> str:
    return _table("frequency_hz,magnitude", (spec.frequencies, spec.magnitudes), FLOAT_FMT)


def map_csv(bmap) -> str:
    xx, yy = np.meshgrid(bmap.x, bmap.y, indexing="xy")
    return _table("x_um,y_um,factor", (xx.ravel() * 1e6, yy.ravel() * 1e6, bmap.factor.ravel()), FLOAT_FMT)


def trace_csv(lock, decimation: int = 1) -> str:
    sl = slice(None, None, decimation)
    return _table(
        "time_s,field_deviation_T,correction_T",
        (lock.times[sl], lock.field_trace[sl], lock.correction[sl]),
        FLOAT_FMT,
    )


def histogram_csv(centers: np.ndarray, counts: np.ndarray) -> str:
    return _table("center_T,count", (centers, counts), [FLOAT_FMT, "%d"])


# ─── Records ───

async def read_record(run_path: Path) -> dict:
    """record.json of a run directory (or the file itself)."""
    path = run_path / "record.json" if run_path.is_dir() else run_path
    if not path.is_file():
        raise ConfigurationError(f"no record.json under {run_path}")
    async with aiofiles.open(path, "r", encoding="utf-8") as f:
        raw = await f.read()
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
