import sys

import numpy as np
import pytest

from diamondseg.imaging import Sample


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_sample(sid="s0", run="run0", t=0.0, size=32, seed=0, split="pool"):
    r = np.random.default_rng(seed)
    image = r.integers(0, 256, (size, size), dtype=np.uint8)
    mask = r.integers(0, 4, (size, size), dtype=np.uint8)
    return Sample(sid, run, t, image, mask, split)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
