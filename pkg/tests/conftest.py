import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cohort.config import scenario

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_cfg():
    """default3 trimmed to a 20 s horizon for quick simulations."""
    return scenario("default3", horizon_s=20.0)


def quiet(cfg, **sim):
    """Copy of cfg with processing noise and RTT jitter switched off."""
    d = cfg.to_dict()
    d["sim"].update({"proc_noise_sd": 0.0, **sim})
    for link in d["links"]:
        link["jitter_sd"] = 0.0
    return type(cfg).from_dict(d)
