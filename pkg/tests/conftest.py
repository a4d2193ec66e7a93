import dataclasses
import time

import pytest

from mmgsim.engine import run_scenario
from mmgsim.metrics import summarize
from mmgsim.scenario import bundled_scenario_path, load_scenario


@pytest.fixture(scope="session")
def default_cfg():
    return load_scenario(bundled_scenario_path("default_table1"))


@pytest.fixture(scope="session")
def default_run(default_cfg):
    """One full default-scenario run shared by the closed-loop tests."""
    trace = run_scenario(default_cfg)
    return default_cfg, trace, summarize(trace, default_cfg)


@pytest.fixture(scope="session")
def baseline_run(default_cfg):
    """Default scenario with the compensator never enabled (events stripped)."""
    cfg = dataclasses.replace(
        default_cfg, events=(),
        run=dataclasses.replace(default_cfg.run, duration_s=2.0))
    t0 = time.perf_counter()
    trace = run_scenario(cfg)
    wall = time.perf_counter() - t0
    return cfg, trace, wall
