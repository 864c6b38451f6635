import json
from pathlib import Path

import numpy as np
import pytest

from eqrestore.denoiser import GmmDenoiser, random_gmm
from eqrestore.sampler import DegradedObservation, SamplerContext
from eqrestore.schedule import build_schedule, select_timesteps

FIXTURES = Path(__file__).resolve().parent / "fixtures"


def load_json(name):
    return json.loads((FIXTURES / name).read_text())


def make_context(op, gmm, x, T=6, eta=0.0, workers=1, sigma=0.0):
    sched = build_schedule()
    plan = select_timesteps(sched, T)
    obs = DegradedObservation.from_clean(x, op, sigma=sigma, rng=np.random.default_rng(1))
    return SamplerContext.build(sched, plan, obs, GmmDenoiser(gmm), eta=eta, workers=workers)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def gmm_small():
    shape = (3, 8, 8)
    gmm = random_gmm(shape, 3, seed=4)
    x = gmm.sample(np.random.default_rng(4))[0]
    return gmm, x
