import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bsdr import kernels
from bsdr.gridworld import GridSpec
from bsdr.model import BsdrParams

settings.register_profile("bsdr", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("bsdr")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def spec3():
    """3x3, T=3, single goal in the far corner."""
    return GridSpec(3, 3, (0, 0), [(2, 2)], 3)


@pytest.fixture
def spec_obst():
    return GridSpec(4, 3, (0, 1), [(3, 0), (3, 2)], 4, obstacles=[(1, 1), (2, 0)])


@pytest.fixture
def params2():
    return BsdrParams([0.3, -1.2], [1.5, 2.0])


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


def pytest_terminal_summary(terminalreporter):
    """Echo the per-criterion lines printed by the acceptance tests."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance" not in getattr(rep, "nodeid", "") or rep.when != "call":
                continue
            for name, text in rep.sections:
                if "stdout" in name:
                    lines += [ln for ln in text.splitlines() if " criterion " in ln]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(ln)
