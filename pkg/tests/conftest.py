"""Shared fixtures: packaged grid fixtures and a small labeled dataset.

The small dataset is built once per session from the 9-bus fixture so the
encoder/training/evaluation tests exercise real solver output without each
test paying for sampling and labeling.
"""

import os
from pathlib import Path

# Cap BLAS pools before numpy initializes; keeps timing-sensitive tests and
# parallel pytest workers from fighting over cores.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from pqvnet.encoder import build_dataset
from pqvnet.grid import load_grid, sample_operating_points, solve_power_flow
from pqvnet.stability import DynamicParams, assess_security

GRIDS = Path(__file__).resolve().parent.parent / "grids"
OMEGA_S_60HZ = 2.0 * np.pi * 60.0


@pytest.fixture(scope="session")
def wscc9():
    return load_grid(GRIDS / "wscc9.json")


@pytest.fixture(scope="session")
def two_bus():
    return load_grid(GRIDS / "two_bus.json")


@pytest.fixture(scope="session")
def ring3():
    return load_grid(GRIDS / "ring3.json")


@pytest.fixture(scope="session")
def wscc9_dyn(wscc9):
    return DynamicParams.from_grid(wscc9, omega_s=OMEGA_S_60HZ)


@pytest.fixture(scope="session")
def wscc9_snapshots(wscc9):
    """160 solved operating points around the 9-bus fixture's base loading."""
    points = sample_operating_points(wscc9, spread=0.35, count=160, seed=3)
    return [solve_power_flow(wscc9, inj) for inj in points]


@pytest.fixture(scope="session")
def wscc9_labels(wscc9, wscc9_dyn, wscc9_snapshots):
    return [assess_security(wscc9, snap, wscc9_dyn) for snap in wscc9_snapshots]


@pytest.fixture(scope="session")
def small_dataset(wscc9, wscc9_snapshots, wscc9_labels):
    return build_dataset(wscc9, wscc9_snapshots, wscc9_labels, seed=3)


# Acceptance tests append one human-readable verdict line per criterion here;
# the summary hook replays them after the normal pytest tally so the checklist
# survives output capturing.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
