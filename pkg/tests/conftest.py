import numpy as np
import pytest

from roiattn.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf64(rng, *shape, low=None):
    """float64 leaf with unit-order entries; ``low`` keeps magnitudes away from zero (relu kinks)."""
    v = rng.normal(size=shape)
    if low is not None:
        v = np.sign(v) * (np.abs(v) + low)
    return Tensor(v, requires_grad=True, dtype=np.float64)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Collects one summary line per acceptance criterion for the terminal report."""

    def record(number: int, ok: bool, text: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
