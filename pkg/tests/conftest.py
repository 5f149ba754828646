import numpy as np
import pytest

from supertoken.hsi_io import SceneSpec, make_synthetic_scene, quadrant_layout, separated_spectra


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_scene(height=32, width=32, bands=8, sigma=0.05, seed=3):
    spectra = separated_spectra(4, bands, 1.0, seed=5)
    regions = quadrant_layout(height, width, row_split=height // 2 - 3, col_split=width // 2 + 2)
    return make_synthetic_scene(SceneSpec(height, width, bands, 4, spectra, sigma, regions, seed))


@pytest.fixture
def scene():
    return small_scene()


# one pass/fail line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
