import numpy as np
import pytest
from threadpoolctl import threadpool_limits

# single-threaded BLAS: timings are per core and results bit-reproducible
_LIMITS = threadpool_limits(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
