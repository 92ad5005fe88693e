import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from posedrl.phantom import PhantomSpec, generate_phantom  # noqa: E402


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(dims=(32, 32, 32))


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(PhantomSpec(), seed=7)


@pytest.fixture(scope="session")
def small_phantoms(small_spec):
    return [generate_phantom(small_spec, seed=s) for s in range(4)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)
