import math

import numpy as np
import pytest

from mflab.geometry import PlanarDomain, build_mesh
from mflab.meanfield import solve_mean_field
from mflab.weights import Atom, AtomicMeasure, build_weight, graded_mesh


@pytest.fixture(scope="session")
def disk():
    return PlanarDomain.unit_disk()


@pytest.fixture(scope="session")
def square():
    return PlanarDomain.unit_square()


@pytest.fixture(scope="session")
def disk_mesh(disk):
    return build_mesh(disk, 0.05)


@pytest.fixture(scope="session")
def square_mesh(square):
    return build_mesh(square, 0.05)


@pytest.fixture(scope="session")
def disk_weight(disk_mesh):
    return build_weight(disk_mesh, AtomicMeasure())


@pytest.fixture(scope="session")
def radial_solution(disk):
    """Disk, no atoms, ρ = 4π on a center-graded mesh."""
    mesh = build_mesh(disk, 0.04, [((0.0, 0.0), 0.5)])
    weight = build_weight(mesh, AtomicMeasure())
    return solve_mean_field(mesh, weight, 4 * math.pi)


@pytest.fixture(scope="session")
def two_atom_square(square):
    measure = AtomicMeasure((Atom(0.35, 0.4, -0.3), Atom(0.65, 0.6, -0.4)))
    mesh = graded_mesh(square, measure, 0.05)
    return mesh, build_weight(mesh, measure)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Collect one PASS/FAIL line per acceptance criterion."""

    def _record(n, ok, detail=""):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
