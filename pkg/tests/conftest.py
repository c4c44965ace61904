import numpy as np
import pytest
from hypothesis import settings

import stockfuse.autodiff as ad

settings.register_profile("ci", deadline=None, derandomize=True, max_examples=25)
settings.load_profile("ci")


@pytest.fixture(autouse=True)
def debug_checks():
    """NaN/Inf-check every forward op in tests (perf tests opt out locally)."""
    ad.set_debug_checks(True)
    yield
    ad.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
