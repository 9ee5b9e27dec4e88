from pathlib import Path

import numpy as np
import pytest

from grounded_cate.data import load_csv
from grounded_cate.simgen import SimConfig, gen_pair

FIXTURES = Path(__file__).parent / "fixtures"

# filled by the acceptance tests, printed once at the end of the session
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])


@pytest.fixture
def rct60():
    return load_csv(FIXTURES / "rct60.csv")


@pytest.fixture(scope="session")
def sim_pair():
    return gen_pair(SimConfig(n_unc=2000, n_conf=5000, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
