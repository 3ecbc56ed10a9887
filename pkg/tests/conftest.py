import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from flowalpha.engine import generate_synthetic  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_panel():
    return generate_synthetic(3, n_days=120, n_assets=12)


@pytest.fixture(scope="session")
def planted_panel():
    from flowalpha.engine import noise_for_ic
    return generate_synthetic(11, n_days=300, n_assets=40, planted="close 10 TsMean close Div",
                              noise=noise_for_ic(0.3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
