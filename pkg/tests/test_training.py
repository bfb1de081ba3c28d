import math
from dataclasses import replace

import numpy as np
import pytest

from bam.errors import MissingLabel
from bam.geometry import AtomicStructure
from bam.model import ModelConfig
from bam.posterior import EnsembleState, IvonState, LaplaceState, SwagState
from bam.synthetic import morse_dataset
from bam.training import (
    LOG_HEADER,
    Ema,
    TrainConfig,
    evaluate,
    species_energy_fit,
    train,
)

CFG = ModelConfig(species_list=(1,), hidden_irreps="2x0e+2x1o", feature_dim=4, l_max=1, r_cut=3.0, head_mode="MVE2")
MVE = ModelConfig(species_list=(1,), hidden_irreps="2x0e+2x1o", feature_dim=4, l_max=1, r_cut=3.0, head_mode="MVE8")


@pytest.fixture(scope="module")
def data():
    return morse_dataset(12, seed=0), morse_dataset(4, seed=1)


@pytest.mark.parametrize(
    "bad",
    [
        {"epochs": -1},
        {"batch_size": 0},
        {"ema_decay": 1.0},
        {"lr_factor": 1.5},
        {"loss": "L1"},
        {"posterior": "mcdropout"},
        {"posterior": "ensemble", "n_members": 1},
        {"swag_rank": 1},
        {"energy_weight": 0.0, "forces_weight": 0.0},
    ],
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_dict_round_trip():
    tc = TrainConfig(epochs=3, posterior="swag", ivon_ess=7.0)
    assert TrainConfig.from_dict(tc.to_dict()) == tc
    assert tc.ivon_hyper(50).ess == 7.0 and TrainConfig().ivon_hyper(50).ess == 50.0


def test_ema_hand_computation():
    ema = Ema(np.array([1.0, 0.0]), 0.9)
    ema.update(np.array([2.0, 10.0]))
    ema.update(np.array([0.0, 0.0]))
    # 0.9 * (0.9 * 1 + 0.1 * 2) = 0.99 ; 0.9 * (0.1 * 10) = 0.9
    np.testing.assert_allclose(ema.value.numpy(), [0.99, 0.9], rtol=1e-15)


def test_species_energy_fit_recovers_known_energies():
    cfg = ModelConfig(species_list=(1, 6, 8))
    ref = np.array([-0.5, -37.8, -75.1])
    rng = np.random.default_rng(3)
    structures = []
    for _ in range(10):
        species = rng.choice([1, 6, 8], size=int(rng.integers(1, 6)))
        counts = np.array([(species == z).sum() for z in (1, 6, 8)])
        pos = np.arange(len(species))[:, None] * np.array([[2.0, 0, 0]])
        structures.append(AtomicStructure(pos, species, energy=float(counts @ ref), forces=np.zeros_like(pos)))
    np.testing.assert_allclose(species_energy_fit(cfg, structures), ref, rtol=1e-10)


def tcfg(**kw):
    base = dict(epochs=3, batch_size=6, max_lr=5e-3, lr_patience=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize(
    "posterior, cfg, state_type",
    [
        ("none", CFG, np.ndarray),
        ("ensemble", CFG, EnsembleState),
        ("swag", CFG, SwagState),
        ("ivon", CFG, IvonState),
        ("laplace", MVE, LaplaceState),
    ],
)
def test_each_posterior_trains(data, posterior, cfg, state_type):
    train_set, val_set = data
    extra = {"n_members": 2} if posterior == "ensemble" else {}
    if posterior == "ivon":
        extra["ivon_ess"] = 1000.0  # twelve dimers give too weak a prior for stable weight noise
    if posterior == "laplace":
        extra["loss"] = "NLL_JEF"
    res = train(train_set, val_set, cfg, tcfg(posterior=posterior, **extra), seed=5)
    assert isinstance(res.model, state_type)
    width = len(LOG_HEADER) + (posterior == "ensemble")
    assert all(len(row) == width for row in res.log)
    assert len(res.log) == 3 * (2 if posterior == "ensemble" else 1)
    assert all(math.isfinite(row[-3]) and math.isfinite(row[-2]) for row in res.log)
    report = evaluate(res.model, cfg, val_set, n_samples=3, seed=2)
    assert {"energy_rmse", "energy_mae", "force_rmse", "force_mae", "energy_ce", "force_ce"} <= set(report.metrics)
    assert report.energy.shape == (4, 3) and report.forces.shape == (4 * 2 * 3, 3)
    assert np.all(report.energy[:, 2] > 0)


def test_same_seed_same_weights(data):
    train_set, val_set = data
    a = train(train_set, val_set, CFG, tcfg(), seed=11)
    b = train(train_set, val_set, CFG, tcfg(), seed=11)
    c = train(train_set, val_set, CFG, tcfg(), seed=12)
    assert a.params.tobytes() == b.params.tobytes() and a.log == b.log
    assert not np.array_equal(a.params, c.params)


def test_training_reduces_loss(data):
    train_set, val_set = data
    res = train(train_set, val_set, CFG, tcfg(epochs=40, max_lr=1e-2), seed=0)
    assert res.log[-1][1] < res.log[0][1]


def test_zero_epochs_and_metric_oracle(data):
    train_set, val_set = data
    res = train(train_set, val_set, CFG, tcfg(epochs=0), seed=0)
    assert res.log == []
    report = evaluate(res.model, CFG, val_set)
    e_err = report.energy[:, 1] - report.energy[:, 0]
    assert report.metrics["energy_rmse"] == pytest.approx(math.sqrt(np.mean(e_err**2)), rel=1e-14)
    f_err = report.forces[:, 1] - report.forces[:, 0]
    assert report.metrics["force_mae"] == pytest.approx(np.mean(np.abs(f_err)), rel=1e-14)
    assert report.ids == [s.info["id"] for s in val_set]


def test_head_mismatch_and_missing_labels(data):
    train_set, val_set = data
    with pytest.raises(ValueError):
        train(train_set, val_set, replace(CFG, head_mode="Base"), tcfg(loss="NLL_JEF"), seed=0)
    unlabeled = [AtomicStructure([[0, 0, 0], [1.2, 0, 0]], [1, 1])]
    with pytest.raises(MissingLabel):
        train(unlabeled, [], CFG, tcfg(), seed=0)
    with pytest.raises(MissingLabel):
        evaluate(np.zeros(1), CFG, unlabeled)
