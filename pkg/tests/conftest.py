import numpy as np
import pytest

from udtnet.pose_trace import PoseTrace
from udtnet.volumetric import Frustum, PointCloudFrame, TileGrid

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def yaw(deg):
    """Quaternion for a rotation of ``deg`` about +y (positive turns +z towards +x)."""
    h = np.radians(deg) / 2
    return (np.cos(h), 0.0, np.sin(h), 0.0)


@pytest.fixture
def two_point_frame():
    return PointCloudFrame(0, [(-0.5, 0.0, 1.0), (0.5, 0.0, 1.0)])


@pytest.fixture
def split_grid():
    return TileGrid((-1.0, -1.0, 0.5), (1.0, 1.0, 1.5), (2, 1, 1))


@pytest.fixture
def wide_cam():
    return Frustum(90.0, 90.0, 0.1, 10.0)


def static_trace(n=31, rate=30.0, user_id="still"):
    return PoseTrace(user_id, np.arange(n) / rate, np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)))
