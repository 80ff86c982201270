"""Shared fixtures: isolated config, a planned XY8 protocol and quiet sensors."""

import copy
from dataclasses import fields, replace

import pytest

from app.config import config
from app.nv_response import PulseSequenceSpec, sensor_preset
from app.sr_engine import plan_protocol

F0 = 3.74065e6
CLOCK_PERIOD = 1.0 / 12e9


@pytest.fixture(autouse=True)
def isolated_config(tmp_path):
    """Point artifacts and the registry at tmp_path; restore the singleton afterwards."""
    saved = copy.copy(config)
    config.out_dir = str(tmp_path / "runs")
    config.registry_url = f"sqlite:///{tmp_path / 'runs' / 'registry.sqlite'}"
    config.plots_enabled = False
    config.paper_scale = False
    config.max_workers = 2
    yield config
    for f in fields(config):
        setattr(config, f.name, getattr(saved, f.name))


@pytest.fixture
def xy8():
    return PulseSequenceSpec.for_frequency("XY8", 6, F0, 16.6e6)


@pytest.fixture
def protocol(xy8):
    return plan_protocol(F0, 24.06e-6, CLOCK_PERIOD, xy8, n_iterations=4000)


@pytest.fixture
def ensemble_sensor():
    return sensor_preset("paper-ensemble")


@pytest.fixture
def quiet_sensor():
    return replace(sensor_preset("paper-ensemble"), photons_per_readout=1e14)
