import sys

import numpy as np
import pytest

from metaformer import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _f64_default():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


def pytest_terminal_summary(terminalreporter):
    mods = [m for name, m in sys.modules.items() if name.endswith("test_acceptance")]
    results = {}
    for m in mods:
        results.update(getattr(m, "RESULTS", {}))
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
