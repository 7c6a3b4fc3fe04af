import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_session():
    from ppgbp.synth import ProtocolConfig, generate_session

    return generate_session(ProtocolConfig(rng_seed=1000), "S01")


@pytest.fixture(scope="session")
def default_subject(default_session):
    from ppgbp.pipeline import prepare_subject

    session, _ = default_session
    return prepare_subject(session)
