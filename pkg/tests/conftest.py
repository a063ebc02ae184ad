import sys

import numpy as np
import pytest

from priorscale.scheduler import build_schedule


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


def block_image(rng, blocks_h, blocks_w, block=8):
    """Grey image that is constant over ``block`` x ``block`` tiles."""
    levels = rng.random((blocks_h, blocks_w))
    grey = np.kron(levels, np.ones((block, block)))
    return np.repeat(grey[..., None], 3, axis=2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.startswith("INFO")):
            terminalreporter.write_line(line)
