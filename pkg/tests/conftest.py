import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowctrl import case39 as _case39  # noqa: E402
from flowctrl.scenario import build_dataset  # noqa: E402

CASE39_SEED = 7
CASE39_DRAWS = 300


@pytest.fixture(scope="session")
def case39():
    return _case39()


@pytest.fixture(scope="session")
def case39_dataset(case39):
    """Sorted scenario set used by the case39 studies (fixed seed)."""
    return build_dataset(case39, CASE39_DRAWS, CASE39_SEED)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for line in results:
        terminalreporter.write_line(line)
