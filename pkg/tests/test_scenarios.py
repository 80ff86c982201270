import json

import pytest

from app import runner
from app.scenarios import (
    BUNDLED,
    AnalysisSpec,
    Scenario,
    ScenarioValidationError,
    apply_overrides,
    check_value,
    evaluate_checks,
    effective_seed,
    load_scenario,
    parse_model,
    parse_scenario,
    scenario_hash,
    set_path,
    with_overrides,
)


def _minimal(**extra):
    data = {
        "name": "tone",
        "sample": {"lines": [{"frequency_hz": 3741648.0, "amplitude_tesla": 5e-9}]},
        "protocol": {"f0_hz": 3.74065e6, "target_tau_s": 24.06e-6, "n_iterations": 4000},
    }
    data.update(extra)
    return data


def test_minimal_scenario_defaults():
    scenario = parse_scenario(_minimal())
    assert scenario.kind == "sr"
    assert scenario.sensor.preset == "paper-ensemble"
    assert scenario.analysis.discard == 20
    assert scenario.n_averages == 1


def test_round_trip_through_json():
    scenario = parse_scenario(_minimal(checks=[{"metric": "centers_hz.0", "expected": 1000.0, "tolerance": 1.0}]))
    again = parse_scenario(json.loads(scenario.model_dump_json()))
    assert again == scenario


def test_errors_name_the_offending_field():
    with pytest.raises(ScenarioValidationError, match=r"protocol\.f0_hz"):
        parse_scenario(_minimal(protocol={"f0_hz": -1.0, "target_tau_s": 24e-6}))
    with pytest.raises(ScenarioValidationError, match=r"sample\.bogus"):
        parse_scenario(_minimal(sample={"named": "water", "bogus": 1}))
    with pytest.raises(ScenarioValidationError, match="need `sample` and `protocol`"):
        parse_scenario({"name": "empty"})
    with pytest.raises(ScenarioValidationError):
        parse_scenario([1, 2, 3])


def test_sweep_shape_is_validated():
    with pytest.raises(ScenarioValidationError, match="labels"):
        parse_scenario(_minimal(sweep={"parameter": "n_averages", "values": [1, 2], "labels": ["a"]}))
    with pytest.raises(ScenarioValidationError, match="override object"):
        parse_scenario(_minimal(sweep={"values": [1, 2]}))


def test_paper_scale_overrides_apply_before_validation():
    data = _minimal(n_averages=4, paper_scale={"n_averages": 1024, "protocol.n_iterations": 400000})
    assert parse_scenario(data).n_averages == 4
    scaled = parse_scenario(data, paper_scale=True)
    assert scaled.n_averages == 1024
    assert scaled.protocol.n_iterations == 400000


def test_bad_paper_scale_paths_are_validation_errors():
    for overrides in ({"seed.value": 3}, {"sample.lines.x": 1}, {"protocol.n_iterations.0": 1}):
        data = _minimal(seed=3, paper_scale=overrides)
        with pytest.raises(ScenarioValidationError, match="scaled.json"):
            parse_scenario(data, paper_scale=True, source="scaled.json")


def test_set_path_handles_lists_and_new_objects():
    data = {"sample": {"lines": [{"frequency_hz": 1.0}]}}
    set_path(data, "sample.lines.0.frequency_hz", 2.0)
    set_path(data, "residual.sigma_tesla", 1e-9)
    assert data["sample"]["lines"][0]["frequency_hz"] == 2.0
    assert data["residual"] == {"sigma_tesla": 1e-9}
    original = {"a": {"b": 1}}
    assert apply_overrides(original, {"a.b": 2}) == {"a": {"b": 2}}
    assert original == {"a": {"b": 1}}


def test_with_overrides_builds_a_point():
    scenario = parse_scenario(_minimal(
        sweep={"parameter": "protocol.target_tau_s", "values": [24.06e-6, 48.12e-6]},
        checks=[{"metric": "points.0.fwhm_hz", "expected": 1.0, "tolerance": 1.0}],
    ))
    point = with_overrides(scenario, {"protocol.target_tau_s": 48.12e-6}, "slow")
    assert point.name == "tone/slow"
    assert point.protocol.target_tau_s == 48.12e-6
    assert point.sweep is None
    assert point.checks == []
    with pytest.raises(ScenarioValidationError):
        with_overrides(scenario, {"n_averages": 0})
    with pytest.raises(ScenarioValidationError, match="cannot apply override"):
        with_overrides(scenario, {"name.x.y": 1})


def test_fig2_runs_cpmg_32():
    protocol = runner.build_protocol(load_scenario("fig2-downscaled").protocol)
    assert protocol.subsequence.family == "CPMG"
    assert protocol.subsequence.n_pulses == 32
    assert protocol.k == 280


def test_fig3d_echo_uses_two_pulses():
    scenario = load_scenario("fig3d-trio")
    points = dict(zip(scenario.sweep.point_labels(), scenario.sweep.point_overrides()))
    assert points["water-echo"]["sample.pi_pulses_s"] == [0.04, 0.12]
    assert len(points["water-echo-train"]["sample.pi_pulses_s"]) == 24


def test_hash_covers_seed_and_scale():
    scenario = parse_scenario(_minimal())
    base = scenario_hash(scenario, 1)
    assert base == scenario_hash(parse_scenario(_minimal()), 1)
    assert base != scenario_hash(scenario, 2)
    assert base != scenario_hash(scenario, 1, paper_scale=True)
    assert len(base) == 64


def test_effective_seed_precedence():
    scenario = parse_scenario(_minimal(seed=5))
    assert effective_seed(scenario, None, 2017) == 5
    assert effective_seed(scenario, 9, 2017) == 9
    assert effective_seed(parse_scenario(_minimal()), None, 2017) == 2017


def test_check_lookup_and_evaluation():
    metrics = {"centers_hz": [999.7], "gyromagnetic": {"slope": 42.58e6}, "model": "lorentzian", "ok": True}
    assert check_value(metrics, "centers_hz.0") == 999.7
    assert check_value(metrics, "gyromagnetic.slope") == 42.58e6
    assert check_value(metrics, "centers_hz.3") is None
    assert check_value(metrics, "model") is None
    assert check_value(metrics, "ok") is None

    scenario = parse_scenario(_minimal(checks=[
        {"metric": "centers_hz.0", "expected": 999.6, "tolerance": 0.5},
        {"metric": "gyromagnetic.slope", "expected": 42.577e6, "tolerance": 1.0},
        {"metric": "missing", "expected": 0.0, "tolerance": 1.0},
    ]))
    results = evaluate_checks(scenario, metrics)
    assert [r["passed"] for r in results] == [True, False, False]
    assert results[2]["actual"] is None


def test_parse_model_reports_block_errors():
    assert parse_model(AnalysisSpec, {"n_peaks": 2}, "cli").n_peaks == 2
    with pytest.raises(ScenarioValidationError, match="cli: zero_pad"):
        parse_model(AnalysisSpec, {"zero_pad": 0}, "cli")


def test_load_from_file_and_errors(tmp_path):
    path = tmp_path / "tone.json"
    path.write_text(json.dumps(_minimal()))
    assert load_scenario(path).name == "tone"
    broken = tmp_path / "broken.json"
    broken.write_text('{"name": "x",\n  "kind": }')
    with pytest.raises(ScenarioValidationError, match="line 2"):
        load_scenario(broken)
    with pytest.raises(ScenarioValidationError, match="not found"):
        load_scenario("no-such-scenario")


@pytest.mark.parametrize("name", BUNDLED)
@pytest.mark.parametrize("paper_scale", [False, True])
def test_bundled_scenarios_plan_on_the_clock_grid(name, paper_scale):
    scenario = load_scenario(name, paper_scale=paper_scale)
    assert isinstance(scenario, Scenario)
    points = [scenario]
    if scenario.sweep is not None:
        points += [
            with_overrides(scenario, overrides, label)
            for overrides, label in zip(scenario.sweep.point_overrides(), scenario.sweep.point_labels())
        ]
    for point in points:
        duration = None
        if point.protocol is not None:
            protocol = runner.build_protocol(point.protocol)
            assert protocol.tau_ticks % protocol.period_ticks == 0
            assert protocol.period_ticks % 4 == 0
            duration = protocol.duration
        if point.sample is not None:
            runner.build_sample(point.sample, duration)
        runner.build_sensor(point.sensor)
