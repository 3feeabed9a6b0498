import numpy as np
import pytest

from fbmlab.fbm_core import KernelTable


@pytest.fixture(scope="session")
def tables():
    cache = {}

    def get(h, t=1.0):
        key = (h, t)
        if key not in cache:
            cache[key] = KernelTable.build(h, t)
        return cache[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split("criterion")[1].split()[0])):
        terminalreporter.write_line(line)
