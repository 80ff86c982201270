"""Scenario schema, loading, paper-scale overrides and hashing."""

import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app import __version__
from app.config import SCENARIOS_DIR
from app.errors import ConfigurationError

logger = logging.getLogger(__name__)

BUNDLED = (
    "fig1-demo", "fig2-downscaled", "fig3b-glycerol", "fig3c-sweep", "fig3d-trio",
    "fig4a-tmp", "fig4b-xylene", "suppS1-sensitivity", "suppS3-lock", "suppS4-sweeps",
    "suppS5-backaction",
)


class ScenarioValidationError(ConfigurationError):
    """Raised when a scenario file does not parse or violates a constraint."""
    pass


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ─── Sample / protocol / sensor ───

class LineSpec(_Spec):
    frequency_hz: float = Field(gt=0)
    amplitude_tesla: float = Field(ge=0)
    phase_rad: float = 0.0
    t2_s: Optional[float] = Field(default=None, gt=0)
    gate_start_s: Optional[float] = Field(default=None, ge=0)
    gate_stop_s: Optional[float] = Field(default=None, gt=0)


class EnsembleSpec(_Spec):
    kind: Literal["lorentzian", "gaussian"] = "lorentzian"
    width_hz: float = Field(ge=0)


class FieldNoiseSpec(_Spec):
    kind: Literal["white", "random-walk"] = "white"
    sigma_tesla: float = Field(ge=0)


class SampleSpec(_Spec):
    named: Optional[Literal["glycerol", "water", "tmp", "xylene", "three-tone-antenna"]] = None
    b0_tesla: float = Field(default=0.0882, gt=0)
    line_scale_tesla: float = Field(default=1e-9, ge=0)
    lines: list[LineSpec] = Field(default_factory=list)
    ensemble: Optional[EnsembleSpec] = None
    n_isochromats: int = Field(default=4096, ge=1)
    pi_pulses_s: list[float] = Field(default_factory=list)
    field_noise: Optional[FieldNoiseSpec] = None

    @model_validator(mode="after")
    def _has_lines(self):
        if self.named is None and not self.lines:
            raise ValueError("sample needs `named` or at least one entry in `lines`")
        return self


class ProtocolSpec(_Spec):
    f0_hz: float = Field(gt=0)
    target_tau_s: float = Field(gt=0)
    clock_period_s: float = Field(default=1.0 / 12e9, gt=0)
    family: Literal["XY8", "CPMG"] = "XY8"
    repetitions: int = Field(default=6, ge=1)
    rabi_hz: float = Field(default=16.6e6, gt=0)
    n_iterations: int = Field(default=40_000, ge=2)
    start_ticks: int = Field(default=0, ge=0)
    jitter_s: float = Field(default=0.0, ge=0)
    nv_drive_hz: Optional[float] = Field(default=None, gt=0)


class SensorSpec(_Spec):
    preset: Literal["paper-ensemble", "paper-single-nv"] = "paper-ensemble"
    contrast: Optional[float] = Field(default=None, gt=0, lt=1)
    photons_per_readout: Optional[float] = Field(default=None, gt=0)
    pair_subtraction: Optional[bool] = None


class AnalysisSpec(_Spec):
    n_peaks: int = Field(default=1, ge=1)
    model: Literal["auto", "lorentzian", "gaussian"] = "auto"
    discard: int = Field(default=20, ge=0)
    zero_pad: int = Field(default=1, ge=1)
    window_hz: Optional[list[float]] = Field(default=None, min_length=2, max_length=2)
    window_half_width_hz: Optional[float] = Field(default=None, gt=0)
    init_hz: Optional[list[list[float]]] = None


# ─── Injections ───

class ReferenceSpec(_Spec):
    """Calibrated antenna pulse, placed at f0_grid + offset_hz."""

    offset_hz: float
    amplitude_tesla: float = Field(gt=0)
    start_s: float = Field(ge=0)
    duration_s: float = Field(gt=0)


class DriftSpec(_Spec):
    random_walk_sigma_tesla_per_rts: float = Field(default=20e-9, ge=0)
    white_sigma_tesla: float = Field(default=5e-9, ge=0)
    slow_drift_rate_tesla_per_rts: float = Field(default=2.75e-9, ge=0)


class LoopSpec(_Spec):
    fast_bandwidth_hz: float = Field(default=12.5, gt=0)
    slow_period_s: float = Field(default=300.0, gt=0)
    sensor_noise_tesla: float = Field(default=3e-9, ge=0)
    actuator_resolution_tesla: float = Field(default=0.0, ge=0)
    enabled: bool = True
    gain: float = 1.0


class ResidualSpec(_Spec):
    kind: Literal["static", "lock"] = "static"
    sigma_tesla: float = Field(default=25e-9, ge=0)
    drift: DriftSpec = Field(default_factory=DriftSpec)
    loop: LoopSpec = Field(default_factory=LoopSpec)
    dt_s: float = Field(default=0.04, gt=0)


class LayerSpec(_Spec):
    polarized_density_per_m3: float = Field(default=0.8e23, gt=0)
    fwhm_x_m: float = Field(default=15e-6, gt=0)
    fwhm_y_m: float = Field(default=10e-6, gt=0)
    thickness_m: float = Field(default=15e-6, gt=0)


class BackActionInjectionSpec(_Spec):
    layer: LayerSpec = Field(default_factory=LayerSpec)
    z_plane_m: float = Field(default=2e-6, gt=0)
    extent_m: float = Field(default=25e-6, gt=0)
    resolution: int = Field(default=64, ge=2)


# ─── Non-SR kinds ───

class LockScenarioSpec(_Spec):
    drift: DriftSpec = Field(default_factory=DriftSpec)
    loop: LoopSpec = Field(default_factory=LoopSpec)
    duration_s: float = Field(default=21_600.0, gt=0)
    dt_s: float = Field(default=0.04, gt=0)
    trace_decimation: int = Field(default=25, ge=1)
    histogram_bins: int = Field(default=41, ge=2)


class BackActionScenarioSpec(_Spec):
    layer: LayerSpec = Field(default_factory=LayerSpec)
    z_planes_m: list[float] = Field(default_factory=lambda: [2e-6])
    extent_m: float = Field(default=25e-6, gt=0)
    resolution: int = Field(default=64, ge=2)
    volume_radius_m: float = Field(default=25e-6, gt=0)
    duty: float = Field(default=0.53, ge=0, le=1)


class SensitivitySpec(_Spec):
    duration_s: float = Field(default=1.0, gt=0)
    photon_scales: list[float] = Field(default_factory=lambda: [1.0, 4.0])
    averages: list[int] = Field(default_factory=lambda: [1, 4])


class AcZeemanSpec(_Spec):
    detuning_hz: float = 400e6


class SweepSpec(_Spec):
    parameter: Optional[str] = None
    values: list[Any] = Field(min_length=1)
    labels: Optional[list[str]] = None
    report: Optional[Literal["gyromagnetic"]] = None

    @model_validator(mode="after")
    def _shape(self):
        if self.parameter is None and not all(isinstance(v, dict) for v in self.values):
            raise ValueError("without `parameter`, every sweep value must be an override object")
        if self.labels is not None and len(self.labels) != len(self.values):
            raise ValueError("`labels` must match `values` in length")
        return self

    def point_labels(self) -> list[str]:
        if self.labels is not None:
            return list(self.labels)
        if self.parameter is not None:
            return [f"{self.parameter}={v}" for v in self.values]
        return [f"point-{i}" for i in range(len(self.values))]

    def point_overrides(self) -> list[dict]:
        if self.parameter is not None:
            return [{self.parameter: v} for v in self.values]
        return [dict(v) for v in self.values]


class CheckSpec(_Spec):
    metric: str
    expected: float
    tolerance: float = Field(ge=0)


class Scenario(_Spec):
    name: str = Field(min_length=1)
    kind: Literal["sr", "lock", "backaction", "sensitivity"] = "sr"
    description: str = ""
    seed: Optional[int] = Field(default=None, ge=0)

    sample: Optional[SampleSpec] = None
    protocol: Optional[ProtocolSpec] = None
    sensor: SensorSpec = Field(default_factory=SensorSpec)
    analysis: AnalysisSpec = Field(default_factory=AnalysisSpec)
    n_averages: int = Field(default=1, ge=1)
    repeats: int = Field(default=1, ge=1)

    reference: Optional[ReferenceSpec] = None
    residual: Optional[ResidualSpec] = None
    back_action: Optional[BackActionInjectionSpec] = None
    ac_zeeman: Optional[AcZeemanSpec] = None

    lock: Optional[LockScenarioSpec] = None
    backaction: Optional[BackActionScenarioSpec] = None
    sensitivity: Optional[SensitivitySpec] = None

    sweep: Optional[SweepSpec] = None
    checks: list[CheckSpec] = Field(default_factory=list)
    paper_scale: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _blocks_for_kind(self):
        if self.kind == "sr" and (self.sample is None or self.protocol is None):
            raise ValueError("sr scenarios need `sample` and `protocol`")
        if self.kind == "sensitivity" and self.protocol is None:
            raise ValueError("sensitivity scenarios need `protocol`")
        if self.kind == "lock" and self.lock is None:
            raise ValueError("lock scenarios need a `lock` block")
        if self.kind == "backaction" and self.backaction is None:
            raise ValueError("backaction scenarios need a `backaction` block")
        return self


# ─── Loading ───

def set_path(data: dict, path: str, value: Any) -> None:
    """Set a dotted path (list indices as integers) inside nested dicts, creating objects."""
    keys = path.split(".")
    node = data
    for key in keys[:-1]:
        if isinstance(node, list):
            node = node[int(key)]
            continue
        if node.get(key) is None:
            node[key] = {}
        node = node[key]
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def apply_overrides(data: dict, overrides: dict) -> dict:
    out = copy.deepcopy(data)
    for path, value in overrides.items():
        set_path(out, path, copy.deepcopy(value))
    return out


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_scenario(data: dict, paper_scale: bool = False, source: str = "<dict>") -> Scenario:
    """Validate raw scenario data; paper-scale overrides apply before validation."""
    if not isinstance(data, dict):
        raise ScenarioValidationError(f"{source}: scenario must be a JSON object")
    try:
        if paper_scale and data.get("paper_scale"):
            data = apply_overrides(data, data["paper_scale"])
        return Scenario.model_validate(data)
    except ValidationError as e:
        raise ScenarioValidationError(f"{source}: {_format_errors(e)}") from e
    except (KeyError, IndexError, TypeError, AttributeError, ValueError) as e:
        raise ScenarioValidationError(f"{source}: {e}") from e


def parse_model(model: type[BaseModel], data: dict, source: str) -> BaseModel:
    """Validate one schema block, re-raising as ScenarioValidationError."""
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ScenarioValidationError(f"{source}: {_format_errors(e)}") from e


def resolve_path(ref: Union[str, Path]) -> Path:
    """A file path, or the name of a bundled scenario."""
    path = Path(ref)
    if path.is_file():
        return path
    bundled = SCENARIOS_DIR / f"{ref}.json"
    if bundled.is_file():
        return bundled
    raise ScenarioValidationError(f"scenario {ref!r} not found (no such file, no bundled scenario)")


def load_raw(ref: Union[str, Path]) -> dict:
    path = resolve_path(ref)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioValidationError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e


def load_scenario(ref: Union[str, Path], paper_scale: bool = False) -> Scenario:
    path = resolve_path(ref)
    scenario = parse_scenario(load_raw(path), paper_scale=paper_scale, source=str(path))
    logger.debug(f"Loaded scenario {scenario.name} ({scenario.kind}) from {path}")
    return scenario


def with_overrides(scenario: Scenario, overrides: dict, name_suffix: str = "") -> Scenario:
    """Re-validate a scenario with dotted-path overrides applied (sweep points)."""
    data = scenario.model_dump(mode="json")
    data.pop("sweep", None)
    # Sweep-level checks describe the aggregate; points carry only their own
    data.pop("checks", None)
    try:
        data = apply_overrides(data, overrides)
    except (KeyError, IndexError, TypeError, AttributeError, ValueError) as e:
        raise ScenarioValidationError(f"{scenario.name}: cannot apply override {overrides}: {e}") from e
    if name_suffix:
        data["name"] = f"{scenario.name}/{name_suffix}"
    return parse_scenario(data, source=f"{scenario.name} sweep point")


# ─── Hashing ───

def canonical_json(scenario: Scenario) -> str:
    return json.dumps(scenario.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def scenario_hash(scenario: Scenario, seed: int, paper_scale: bool = False) -> str:
    """sha256 over every input that affects outputs."""
    payload = f"{canonical_json(scenario)}|seed={seed}|paper_scale={int(paper_scale)}|version={__version__}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def effective_seed(scenario: Scenario, override: Optional[int], default: int) -> int:
    if override is not None:
        return override
    return scenario.seed if scenario.seed is not None else default


def check_value(metrics: dict, metric: str) -> Optional[float]:
    """Look up a (possibly dotted, possibly indexed) metric."""
    node: Any = metrics
    for key in metric.split("."):
        if isinstance(node, list):
            try:
                node = node[int(key)]
            except (ValueError, IndexError):
                return None
        elif isinstance(node, dict) and key in node:
            node = node[key]
        else:
            return None
    return float(node) if isinstance(node, (int, float)) and not isinstance(node, bool) else None


def evaluate_checks(scenario: Scenario, metrics: dict) -> list[dict]:
    results = []
    for check in scenario.checks:
        actual = check_value(metrics, check.metric)
        passed = actual is not None and abs(actual - check.expected) <= check.tolerance
        results.append({
            "metric": check.metric, "expected": check.expected, "tolerance": check.tolerance,
            "actual": actual, "passed": bool(passed),
        })
    return results

