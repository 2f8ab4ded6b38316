import numpy as np
import pytest

from pwapass.model import NonlinearSystem, grid_partition

BP26 = [-0.82, -0.78, -0.74, -0.7, -0.65, -0.6, -0.55, -0.5, -0.45, -0.4, -0.34, -0.28, -0.13, 0.0,
        0.13, 0.28, 0.34, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.74, 0.78, 0.82]
_NEG30 = [-0.5, -0.47, -0.44, -0.41, -0.38, -0.35, -0.32, -0.29, -0.26, -0.23, -0.2, -0.17, -0.14,
          -0.11, -0.07, 0.0]
BP30 = _NEG30 + [-b for b in reversed(_NEG30[:-1])]

X0 = (0.3, 0.1, -0.1)
DISTURBANCE = "0.02*sin(0.2*pi*k)*exp(-k/25)"


def example_system() -> NonlinearSystem:
    return NonlinearSystem.from_strings(["4*sin(x1) + x2", "x1 + x3", "x1"], ["x1"],
                                        [[2], [0], [1]], [[1], [0.5], [0]], [[0.1]], [[2]])


def partition26():
    return grid_partition(0, BP26, [-0.82, -0.5, -0.5], [0.82, 0.5, 0.5])


def partition30():
    return grid_partition(0, BP30, [-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])


@pytest.fixture(scope="session")
def system():
    return example_system()


@pytest.fixture(scope="session")
def part26():
    return partition26()


@pytest.fixture(scope="session")
def part30():
    return partition30()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Print an acceptance line immediately and keep it for the closing summary."""
    def emit(line: str):
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
