import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dxa3d.phantom import generate_phantom, rasterize, sample_params

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def phantom0():
    return generate_phantom(sample_params(3))


@pytest.fixture(scope="session")
def mask0(phantom0):
    return rasterize(phantom0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} [{name}]: {'PASS' if passed else 'FAIL'} ({detail})"
        CRITERIA.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
