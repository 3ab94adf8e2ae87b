from __future__ import annotations

import numpy as np
import pytest

from mmrobust.encoder import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_enc():
    return EncoderConfig(d_model=8, vocab1=7, vocab2=5, max_len1=4, max_len2=3)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
