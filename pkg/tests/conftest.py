import os
import warnings

import numpy as np
import pytest

os.environ.setdefault("TTM_PRECISION", "float64")

from ttm import tensor as T  # noqa: E402

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []
    warnings.filterwarnings("ignore", message="decoder is .* outside the 10-20% band")


@pytest.fixture
def report(request):
    """Record one acceptance line; printed again in the terminal summary."""
    lines = request.config.stash[_LINES]

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _float64():
    T.set_precision("float64")
    yield
    T.set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
