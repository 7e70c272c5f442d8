import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_archive(tmp_path_factory):
    """Processed 8x16 synthetic archive: 2001-2005 train, 2006 val, 2007 test (with a drought event)."""
    from s2sdrought.preprocess import DatasetSplit, preprocess
    from s2sdrought.synth import EventSpec, SynthConfig, synth_generate

    root = tmp_path_factory.mktemp("small")
    cfg = SynthConfig(n_lat=8, n_lon=16, years=tuple(range(2001, 2008)), seed=11, events=[EventSpec(year=2007)])
    raw = synth_generate(cfg, root / "raw")
    split = DatasetSplit(train=tuple(range(2001, 2006)), val=(2006,), test=(2007,))
    return preprocess(raw, root / "processed", split)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
