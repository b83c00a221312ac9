import numpy as np
import pytest

from dualflow import mesh

# pass/fail lines recorded by the acceptance tests, replayed after the
# run summary so they stay visible under captured output
ACCEPTANCE_LINES = []


def record_criterion(number, label, ok):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {label}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def grid8():
    return mesh.build_fine_grid(8)


@pytest.fixture
def grid16():
    return mesh.build_fine_grid(16)


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)
