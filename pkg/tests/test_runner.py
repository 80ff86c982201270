import asyncio
import json
from pathlib import Path

import pytest

from app import database, runner
from app.config import config
from app.constants import CONSTANTS
from app.errors import ConfigurationError
from app.scenarios import AnalysisSpec, parse_scenario
from app.sr_engine import PlanningError

TONE_HZ = 3741648.0


def _sr_scenario(**extra) -> dict:
    data = {
        "name": "tone",
        "kind": "sr",
        "seed": 11,
        "sample": {"lines": [{"frequency_hz": TONE_HZ, "amplitude_tesla": 5e-9}]},
        "protocol": {"f0_hz": 3.74065e6, "target_tau_s": 24.06e-6, "n_iterations": 4000},
        "analysis": {"model": "lorentzian", "zero_pad": 8, "window_half_width_hz": 30.0},
        "checks": [{"metric": "centers_hz.0", "expected": 999.62, "tolerance": 1.0}],
    }
    data.update(extra)
    return data


def _run(coro):
    return asyncio.run(coro)


# ─── SR runs ───

def test_sr_run_writes_artifacts_and_record():
    scenario = parse_scenario(_sr_scenario())
    record = _run(runner.run_scenario(scenario))
    out = Path(record.out_dir)

    assert record.status == "ok"
    assert record.passed
    assert out.parent == Path(config.out_dir)
    assert out.name.startswith("tone-") and out.name.endswith(record.scenario_hash[:12])
    for name in ("series.csv", "series.npz", "spectrum.csv", "fit.json", "fit.txt", "metrics.json", "record.json"):
        assert (out / name).is_file(), name
    assert not (out / "spectrum.svg").exists()

    m = record.metrics
    assert m["centers_hz"][0] == pytest.approx(999.62, abs=1.0)
    assert m["absolute_centers_hz"][0] == pytest.approx(TONE_HZ, abs=1.0)
    assert m["protocol"]["period_ticks"] == 3208
    assert m["protocol"]["k"] == 90
    assert m["parseval_residual"] < 1e-9
    assert json.loads((out / "record.json").read_text())["status"] == "ok"


def test_sr_artifacts_do_not_depend_on_worker_count():
    scenario = parse_scenario(_sr_scenario(n_averages=20))
    first = _run(runner.run_scenario(scenario, workers=1))
    out = Path(first.out_dir)
    series = (out / "series.csv").read_bytes()
    spectrum = (out / "spectrum.csv").read_bytes()
    npz = (out / "series.npz").read_bytes()

    second = _run(runner.run_scenario(scenario, workers=3))
    assert second.out_dir == first.out_dir
    assert (out / "series.csv").read_bytes() == series
    assert (out / "spectrum.csv").read_bytes() == spectrum
    assert (out / "series.npz").read_bytes() == npz
    assert second.metrics["n_averages"] == 20


def test_seed_override_changes_the_run_directory():
    scenario = parse_scenario(_sr_scenario())
    a = _run(runner.run_scenario(scenario))
    b = _run(runner.run_scenario(scenario, seed=12))
    assert a.seed == 11 and b.seed == 12
    assert a.out_dir != b.out_dir


def test_failed_run_still_writes_record():
    data = _sr_scenario()
    data["protocol"]["target_tau_s"] = 1e-7
    scenario = parse_scenario(data)
    with pytest.raises(PlanningError):
        _run(runner.run_scenario(scenario))
    (record_path,) = Path(config.out_dir).glob("tone-*/record.json")
    record = json.loads(record_path.read_text())
    assert record["status"] == "failed"
    assert record["error"] == "PlanningError"


def test_runs_land_in_the_registry():
    async def scenario():
        await database.init_db()
        try:
            record = await runner.run_scenario(parse_scenario(_sr_scenario()))
            return record, await database.get_run(record.scenario_hash)
        finally:
            await database.close_db()

    record, stored = _run(scenario())
    assert stored["status"] == "ok"
    assert stored["metrics"]["centers_hz"] == record.metrics["centers_hz"]
    assert stored["artifacts"]["series_csv"] == "series.csv"


# ─── Sweeps ───

def test_sweep_reports_failed_points_and_continues():
    data = _sr_scenario(sweep={"parameter": "protocol.target_tau_s", "values": [24.06e-6, 1e-7]})
    records, summary = _run(runner.run_sweep(parse_scenario(data)))

    assert len(records) == 1
    rows = summary.metrics["points"]
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert rows[1]["error"] == "PlanningError"
    assert rows[0]["center_hz"] == pytest.approx(999.62, abs=1.0)
    assert summary.metrics["n_ok"] == 1
    out = Path(summary.out_dir)
    assert (out / "summary.csv").is_file()
    assert (out / "summary.json").is_file()
    assert len(list((out / "points").glob("*/record.json"))) == 2


def test_sweep_without_block_raises():
    with pytest.raises(ConfigurationError, match="sweep"):
        _run(runner.run_sweep(parse_scenario(_sr_scenario())))


def test_gyromagnetic_sweep_recovers_proton_ratio():
    data = {
        "name": "b0-sweep",
        "seed": 5,
        "sample": {"named": "water", "b0_tesla": 0.087871, "line_scale_tesla": 2e-8, "n_isochromats": 512},
        "protocol": {"f0_hz": 3.74065e6, "target_tau_s": 24.06e-6, "n_iterations": 20000},
        "analysis": {"model": "lorentzian", "zero_pad": 4, "window_half_width_hz": 40.0},
        "n_averages": 2,
        "sweep": {"parameter": "sample.b0_tesla", "values": [0.087861, 0.087871, 0.087881],
                  "report": "gyromagnetic"},
        "checks": [{"metric": "gyromagnetic.slope", "expected": 42.577e6, "tolerance": 3e4}],
    }
    _, summary = _run(runner.run_sweep(parse_scenario(data)))
    assert summary.metrics["n_ok"] == 3
    assert summary.metrics["gyromagnetic"]["slope"] == pytest.approx(CONSTANTS.gamma_p_freq, abs=3e4)
    assert summary.checks[0]["passed"]


def _water(**sample) -> dict:
    return {
        "name": "water",
        "seed": 2017,
        "sample": {"named": "water", "b0_tesla": 0.08788, "line_scale_tesla": 2e-8, **sample},
        "protocol": {"f0_hz": 3.74065e6, "target_tau_s": 24.06e-6, "n_iterations": 40000},
        "sensor": {"preset": "paper-ensemble"},
        "analysis": {"model": "auto", "zero_pad": 4, "window_half_width_hz": 30.0},
        "n_averages": 8,
    }


def test_two_pulse_echo_narrows_the_water_line():
    fid = _run(runner.run_scenario(parse_scenario(_water())))
    echo = _run(runner.run_scenario(parse_scenario(_water(pi_pulses_s=[0.04, 0.12]))))
    fid_width = fid.metrics["fwhm_hz"][0]
    echo_width = echo.metrics["fwhm_hz"][0]
    assert fid_width == pytest.approx(9.0, abs=1.5)
    assert 0 < echo_width < 0.6 * fid_width


def test_pi_pulse_beyond_the_record_is_rejected():
    data = _sr_scenario()
    data["sample"]["pi_pulses_s"] = [0.05, 0.5]
    scenario = parse_scenario(data)
    with pytest.raises(ConfigurationError, match="pi pulse"):
        runner.build_sample(scenario.sample, runner.build_protocol(scenario.protocol).duration)
    with pytest.raises(ConfigurationError, match="pi pulse"):
        _run(runner.run_scenario(scenario))
    runner.build_sample(scenario.sample)


# ─── Lock, back-action and sensitivity runs ───

def test_lock_run():
    scenario = parse_scenario({"name": "short-lock", "kind": "lock", "lock": {"duration_s": 1200.0}})
    record = _run(runner.run_scenario(scenario))
    m = record.metrics
    assert m["open_loop_rms_tesla"] > m["residual_rms_tesla"] > 0
    assert m["broadening_hz"] > 0
    assert "moments" not in m
    assert set(record.artifacts) >= {"trace_csv", "histogram_csv", "metrics_json"}


def test_backaction_run():
    scenario = parse_scenario({
        "name": "layer",
        "kind": "backaction",
        "backaction": {"z_planes_m": [2e-6], "resolution": 16, "volume_radius_m": 25e-6},
        "checks": [{"metric": "prefactor_tesla", "expected": 37.1e-9, "tolerance": 0.4e-9}],
    })
    record = _run(runner.run_scenario(scenario))
    assert record.passed
    assert len(record.metrics["planes"]) == 1
    assert record.metrics["broadening_hz"] > 0
    assert (Path(record.out_dir) / "map_0.csv").is_file()


def test_sensitivity_run():
    scenario = parse_scenario({
        "name": "floor",
        "kind": "sensitivity",
        "protocol": {"f0_hz": 3.74065e6, "target_tau_s": 24.06e-6},
        "sensitivity": {"duration_s": 0.2},
    })
    m = _run(runner.run_scenario(scenario)).metrics
    assert m["agreement"] == pytest.approx(1.0, abs=0.15)
    assert m["photon_scaling_ratio"] == pytest.approx(1.0, abs=0.1)
    assert 37.5e-12 <= m["closed_form_tesla_rthz"] <= 62.5e-12
    assert list(Path(config.out_dir).glob("floor-*/sensitivity.csv"))


# ─── Analysis and reporting ───

def test_analyze_file_matches_simulated_fit():
    record = _run(runner.run_scenario(parse_scenario(_sr_scenario())))
    series_path = Path(record.out_dir) / "series.csv"
    analysis = AnalysisSpec(model="lorentzian", zero_pad=8, window_half_width_hz=30.0)
    analyzed = _run(runner.analyze_file(series_path, analysis))
    assert analyzed.kind == "analyze"
    assert analyzed.metrics["centers_hz"][0] == pytest.approx(record.metrics["centers_hz"][0], abs=1e-3)
    assert (Path(analyzed.out_dir) / "fit.json").is_file()


def test_analyze_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        _run(runner.analyze_file(tmp_path / "nope.csv", AnalysisSpec()))


def test_report_text_and_rows():
    record = _run(runner.run_scenario(parse_scenario(_sr_scenario())))
    text, rows = runner.report([record, record.to_dict()])
    assert "2 record(s)" in text
    assert "checks: 1/1 passed" in text
    assert rows[0]["name"] == "tone"
    assert rows[0]["checks_passed"] == 1


def test_report_needs_records():
    with pytest.raises(ConfigurationError):
        runner.report([])


def test_plots_are_optional_and_deterministic():
    record = _run(runner.run_scenario(parse_scenario(_sr_scenario()), plots=True))
    svg_path = Path(record.out_dir) / "spectrum.svg"
    assert record.artifacts["spectrum_svg"] == "spectrum.svg"
    first = svg_path.read_text()
    assert "<svg" in first

    _run(runner.run_scenario(parse_scenario(_sr_scenario()), plots=True))
    assert svg_path.read_text() == first
