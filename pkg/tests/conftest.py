import math

import pytest

from zplqe import physics

TWO_PI = 2 * math.pi


@pytest.fixture
def chain():
    return physics.DetectionChain()


@pytest.fixture
def env():
    return physics.EnvironmentParams()


@pytest.fixture
def emitter():
    return physics.EmitterParams.from_linewidth(25e6, 1.0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(verdicts, key=lambda k: int(k.split()[0][1:])):
        terminalreporter.write_line(verdicts[key])
