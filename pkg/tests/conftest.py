import numpy as np
import pytest

from sparge.tensor_io import gen_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gaussian_qkv(n, d, heads=1, seed=0):
    q, k, v = gen_synthetic("gaussian", n, d, 3 * heads, seed).reshape(3, heads, n, d)
    return q, k, v


@pytest.fixture
def small_qkv():
    return gaussian_qkv(300, 32, heads=2, seed=7)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
