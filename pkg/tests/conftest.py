import numpy as np
import pytest
from hypothesis import settings

from codexdg import verify

settings.register_profile("codex", max_examples=40, deadline=None)
settings.load_profile("codex")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def seg_micro():
    return verify.micro_segmentation(D=3, n=2, seed=0)


@pytest.fixture
def cls_micro():
    return verify.micro_classification(D=3, n=4, seed=0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
