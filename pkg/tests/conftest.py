import numpy as np
import pytest

from stiffgrasp.geometry import ShapeSpec, generate_shape


@pytest.fixture(scope="session")
def box_mesh():
    return generate_shape(ShapeSpec("box", {"width": 0.04, "height": 0.02}), 0.006, seed=1)


@pytest.fixture(scope="session")
def disk_mesh():
    return generate_shape(ShapeSpec("disk", {"radius": 0.02}), 0.006, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run whatever the capture mode
CRITERIA: dict = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
