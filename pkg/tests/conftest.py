import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qdbev.geometry import BevGrid, Camera, build_bev_mask  # noqa: E402


@pytest.fixture
def tiny_rig():
    """Two opposite cameras, 8x8 images, a 2x2 grid: small enough for finite differences."""
    rig = [Camera.from_yaw(y, fov_deg=90.0, image_size=(8, 8)) for y in (0.0, 180.0)]
    grid = BevGrid(h=2, w=2, cell_size=4.0, z_levels=(0.5, 1.0))
    return rig, grid, build_bev_mask(rig, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import _pipeline

    if _pipeline.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _pipeline.RESULTS:
            terminalreporter.write_line(line)
