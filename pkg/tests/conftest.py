import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--acceptance-out", default=None,
        help="reuse/populate this directory for the acceptance smoke pipeline "
             "instead of a fresh tmp dir (speeds up repeated runs)")


@pytest.fixture(autouse=True)
def _seeded_numpy():
    # tests draw their own Generators; this only guards stray np.random use
    np.random.seed(0)
