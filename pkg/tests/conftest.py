import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def run_cache():
    """Memoize expensive pipeline runs shared by several tests."""
    from dynba.pipeline import PipelineConfig, run_scenario
    from dynba.sim import generate_scenario, load_scenario, with_overrides

    cache = {}

    def get(name, seed, mode="idy", **overrides):
        key = (name, seed, mode, tuple(sorted(overrides.items())))
        if key not in cache:
            cfg = with_overrides(load_scenario(name), seed=seed, **overrides)
            sc = generate_scenario(cfg)
            pcfg = PipelineConfig() if mode == "idy" else PipelineConfig(classify=False, candidate_residual=False)
            cache[key] = (sc, run_scenario(sc, pcfg))
        return cache[key]

    return get
