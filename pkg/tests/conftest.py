import numpy as np
import pytest

from hiperceiver import numerics as nx


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or benchmark checks")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body with 64-bit tensors."""
    with nx.precision("float64"):
        yield


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion; returns the pass flag."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
