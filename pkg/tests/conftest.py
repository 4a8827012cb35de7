import os

# single-threaded BLAS keeps float reductions in a fixed order
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from querydrl.corpus import QueryPair, build_vocab  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_pairs():
    return [
        QueryPair("machine learning jobs", "machine learning engineer", 1, 0),
        QueryPair("machine learning engineer", "data scientist", 0, 1),
        QueryPair("data scientist", "data scientist remote", 1, 0),
        QueryPair("java developer", "python developer", 0, 0),
        QueryPair("python developer", "python developer jobs", 0, 1),
        QueryPair("nurse", "nurse practitioner", 1, 0),
    ]


@pytest.fixture
def tiny_vocab(tiny_pairs):
    return build_vocab([q for p in tiny_pairs for q in (p.q_i, p.q_next)])


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    def record(number, ok, detail=""):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
