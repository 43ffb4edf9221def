import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from confnas.data import synth_dataset

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@contextmanager
def criterion(number: int, name: str, budget_s: float):
    """Time a block, record PASS/FAIL for the summary, and fail if over budget."""
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE[number] = (name, False, f"{time.perf_counter() - t0:.1f}s; {type(exc).__name__}: {exc}"[:300])
        raise
    elapsed = time.perf_counter() - t0
    ok = elapsed < budget_s
    if ACCEPTANCE.get(number, (None, True))[1]:  # a failure from an earlier case sticks
        ACCEPTANCE[number] = (name, ok, f"{elapsed:.1f}s (budget {budget_s:.0f}s)")
    assert ok, f"criterion {number} took {elapsed:.1f}s, budget {budget_s:.0f}s"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture(scope="session")
def tiny_data():
    return synth_dataset(48, 2, 8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
