import os
import sys

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from bam.geometry import AtomicStructure  # noqa: E402
from bam.model import ModelConfig, init_params  # noqa: E402


def randomize_heads(params, rng, scale=0.3):
    """Give zero-initialised readouts and heads non-trivial values."""
    for name, value in params.arrays.items():
        if name.endswith("readout.w") or name.startswith("head."):
            params.arrays[name] = torch.as_tensor(rng.normal(scale=scale, size=tuple(value.shape)))
    return params


def random_cluster(rng, n=5, species=(1, 6, 8), spread=1.2, min_dist=0.7):
    while True:
        pos = rng.normal(scale=spread, size=(n, 3))
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(n) * 10
        if d.min() > min_dist:
            return AtomicStructure(pos, rng.choice(species, size=n))


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(species_list=(1, 6, 8), r_cut=4.0, n_layers=2, hidden_irreps="4x0e+4x1o+4x2e", feature_dim=8)


@pytest.fixture(scope="session")
def small_params(small_cfg):
    rng = np.random.default_rng(11)
    return randomize_heads(init_params(small_cfg, rng), rng)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria record (number, passed, detail) and echo them after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number, passed, detail in sorted(ACCEPTANCE):
            terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
