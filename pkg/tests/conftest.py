import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[32, 64], ids=lambda ws: f"ws{ws}")
def wordsize(request):
    return request.param


def naive_gemm(W, B):
    """Triple-loop integer product in plain Python ints."""
    W = [[int(v) for v in row] for row in np.asarray(W)]
    B = [[int(v) for v in row] for row in np.asarray(B)]
    m, k, n = len(W), len(B), len(B[0]) if B else 0
    out = [[0] * n for _ in range(m)]
    for r in range(m):
        for c in range(n):
            acc = 0
            for d in range(k):
                acc += W[r][d] * B[d][c]
            out[r][c] = acc
    return np.array(out, dtype=np.int64).reshape(m, n)


def random_operand(rng, shape, bits, signed):
    lo, hi = (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)
    return rng.integers(lo, hi + 1, size=shape)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
