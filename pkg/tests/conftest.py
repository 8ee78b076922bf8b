import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sbevloc.bev import BevConfig, project
from sbevloc.dataset_io import PoseSE2, generate_world, simulate_scan
from sbevloc.model import ModelConfig, init_params

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

SMALL_BEV = BevConfig(extent=16.0, voxel=0.5)


def small_scene(seed=3, pose=PoseSE2(0.0, 0.0, 0.0)):
    world = generate_world(seed, 30.0, 30, 40)
    return world, simulate_scan(world, pose, 20.0, math.radians(0.5), 0.01, seed)


@pytest.fixture(scope="session")
def world():
    return small_scene()[0]


@pytest.fixture(scope="session")
def scan():
    return small_scene()[1]


@pytest.fixture(scope="session")
def bev_image(scan):
    return project(scan, SMALL_BEV)


@pytest.fixture(scope="session")
def tiny_params():
    return init_params(ModelConfig((4, 4), 3, 4, 4), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria record (id, passed, detail) here; printed at the end.
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in sorted(ACCEPTANCE, key=lambda r: (int("".join(filter(str.isdigit, r[0]))), r[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {cid}: {detail}")
