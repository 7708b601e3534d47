import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dsth.data import synthesize_dataset
from dsth.pipeline import AnchorParams, build_anchors

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def easy_data():
    """Three well separated classes, 50 samples each."""
    return synthesize_dataset(3, 50, 32, 16, 0.05, 1.0, seed=0)


@pytest.fixture(scope="session")
def easy_anchors(easy_data):
    return build_anchors(easy_data.visual, AnchorParams(k=50, s=5), seed=0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
