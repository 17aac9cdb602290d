from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from doat.delay_space import DEFAULT_BOX, generate_uniform, make_rng
from doat.sim import Simulator

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def built_sim(n: int, seed: int, **kwargs) -> Simulator:
    sim = Simulator(DEFAULT_BOX, **kwargs)
    sim.build(generate_uniform(n, DEFAULT_BOX, seed), make_rng(seed, "bootstrap"))
    assert sim.run_until_quiescent()
    sim.reset_counters()
    return sim


@pytest.fixture
def make_sim():
    return built_sim
