import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from voxinv.sparse import _backend  # noqa: E402


@pytest.fixture(params=_backend.available_backends())
def backend(request):
    prev = _backend.use_backend(request.param)
    yield request.param
    _backend.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE_LOG

    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LOG, key=lambda e: e[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
