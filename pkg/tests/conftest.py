import sys
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


@lru_cache(maxsize=8)
def _brownian(seed, steps, horizon=1.0):
    from pathwise import brownian_path
    return brownian_path(seed, horizon, steps)


@pytest.fixture
def brownian():
    """Cached seeded Brownian sample: ``brownian(seed, steps)``."""
    return _brownian


def linear_path(horizon=1.0, steps=1, slope=1.0):
    from pathwise import SampledPath
    t = np.linspace(0.0, horizon, steps + 1)
    return SampledPath(t, slope * t)


# filled by the acceptance suite; printed once at the end of the run
VERDICTS = []


def verdict(criterion: str, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
