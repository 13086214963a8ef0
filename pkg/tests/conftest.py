import numpy as np
import pytest

from standage.geodata import Grid, PointCloud, ReturnClass


def make_grid(values, xll=0.0, yll=0.0, cellsize=16.0, nodata=-9999.0):
    return Grid(np.asarray(values, dtype=np.float64), xll, yll, cellsize, nodata)


def random_cloud(rng, n, extent=16.0, zmax=30.0, normalized=True):
    """Normalized cloud with a realistic mix of return classes."""
    x = rng.uniform(0, extent, n)
    y = rng.uniform(0, extent, n)
    z = rng.uniform(0, zmax, n) * rng.uniform(0, 1, n) ** 0.5
    cls = rng.choice(
        [ReturnClass.FIRST, ReturnClass.INTERMEDIATE, ReturnClass.LAST, ReturnClass.ONLY],
        size=n,
        p=[0.35, 0.1, 0.25, 0.3],
    )
    return PointCloud(x, y, z, cls, normalized)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
