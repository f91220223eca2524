import numpy as np
import pytest
from hypothesis import settings

from gradflows.density import Grid, gaussian_density

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def wide_grid():
    """[-12, 12] with spacing 0.01."""
    return Grid.line(-12.0, 12.0, 2401)


@pytest.fixture(scope="session")
def gaussian_pair(wide_grid):
    """N(1, 1) and N(0, 1)."""
    return gaussian_density(wide_grid, [1.0], 1.0), gaussian_density(wide_grid, [0.0], 1.0)


def random_positive_pair(grid, rng):
    """Two normalised Gaussian mixtures with overlapping support."""
    x = grid.axes[0]
    out = []
    for _ in range(2):
        vals = np.zeros_like(x)
        for _ in range(rng.integers(1, 4)):
            m, s, w = rng.uniform(-2, 2), rng.uniform(0.8, 1.5), rng.uniform(0.2, 1.0)
            vals += w * np.exp(-0.5 * ((x - m) / s) ** 2)
        out.append(vals / (vals.sum() * grid.spacing[0]))
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
