import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cbctseg.grid import LabelGrid  # noqa: E402

# acceptance criteria append (name, passed, detail) here; printed at the end of the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")


def backend_available(name):
    from cbctseg import _backend
    try:
        _backend.get(name)
        return True
    except ImportError:
        return False


@pytest.fixture(params=[b for b in ("python", "cython") if backend_available(b)])
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def label_grid(array, spacing=(1.0, 1.0, 1.0)):
    return LabelGrid(np.asarray(array, dtype=np.uint16), spacing)
