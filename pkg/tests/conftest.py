"""Shared fixtures; keeping this file here also puts the tests directory on
sys.path so tests can import the local oracle helpers."""

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
