import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from momentsde import casestudies as cs
from momentsde.structure import HiddenNets, Structure

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=400, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion -> (passed, message); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:2d}: {'PASS' if ok else 'FAIL'}  {msg}")


@pytest.fixture
def ou_structure():
    """dx = -x dt + sqrt(2) dw with no hidden terms."""
    return Structure("ou", A=[[-1.0]], c=[0.0], B=np.zeros((1, 0)), diffusion="constant",
                     sigma=[np.sqrt(2.0)])


@pytest.fixture
def no_nets():
    return HiddenNets(None, None)


@pytest.fixture(scope="session")
def colloidal_structure():
    return cs.learning_structure("colloidal")
