from __future__ import annotations

import numpy as np
import pytest

from surgrecon.geometry import CameraIntrinsics


@pytest.fixture
def K() -> CameraIntrinsics:
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=256.0, baseline=0.005, width=640, height=512)


@pytest.fixture
def small_K() -> CameraIntrinsics:
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=31.5, cy=23.5, baseline=0.005, width=64, height=48)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request) -> list:
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line[1])
