import numpy as np
import pytest

from srrtune.acquisition import MotionConfig, simulate_series_set
from srrtune.geometry import Grid
from srrtune.phantom import SequenceParams, generate_phantom, load_tissue_table, reference_hr

SMALL_DIMS = 48


@pytest.fixture(scope="session")
def seq15():
    return SequenceParams.preset(1.5)


@pytest.fixture(scope="session")
def small_grid():
    return Grid.centered(SMALL_DIMS, 1.1)


@pytest.fixture(scope="session")
def small_labels(small_grid):
    return generate_phantom(30, small_grid, seed=0)


@pytest.fixture(scope="session")
def small_hr(small_labels, seq15):
    return reference_hr(small_labels, load_tissue_table(1.5), seq15)


@pytest.fixture(scope="session")
def small_series(small_hr, seq15):
    return simulate_series_set(small_hr, seq15, MotionConfig.preset("little", 0), per_orientation=1, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    def log(criterion: int, passed: bool, detail: str):
        line = f"CRITERION {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
