import numpy as np
import pytest

from reident_ens.data import Sample, generate_synthetic

_BLANK = np.zeros((16, 16, 3), dtype=np.uint8)


def make_sample(subject, view, pixels=None):
    return Sample(_BLANK if pixels is None else pixels, str(subject), str(view))


def tiny_corpus(n_subjects, views):
    """Blank-image samples; enough for fold and split bookkeeping."""
    return [make_sample(f"s{s}", v) for s in range(n_subjects) for v in range(views)]


@pytest.fixture(scope="session")
def synthetic_small():
    return generate_synthetic(12, 4, width=48, height=32, seed=3)


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
