import sys

import numpy as np
import pytest

from speckle_lab.speckle import SpeckleParams, render_reference


@pytest.fixture(scope="session")
def speckle64():
    return render_reference(SpeckleParams(seed=11), 64, 64)


@pytest.fixture(scope="session")
def speckle128():
    return render_reference(SpeckleParams(seed=5), 128, 128)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
