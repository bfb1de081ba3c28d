"""Desk-scale experiments on the analytic dimer potentials.

Both are plain functions so the scripts and the acceptance tests share one
definition of each protocol.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .active_learning import al_round
from .model import ModelConfig
from .synthetic import OOD_RANGE, morse_dataset, two_regime_sets
from .training import TrainConfig, evaluate, train

MORSE_MODEL = ModelConfig(
    species_list=(1,), r_cut=3.0, n_layers=2, hidden_irreps="8x0e+8x1o", feature_dim=8, l_max=1, head_mode="Base"
)
MORSE_TRAIN = TrainConfig(epochs=2000, batch_size=500, max_lr=1e-2, loss="MSE", lr_patience=25)

# The dimer labels are noise free, so the likelihood would happily shrink every
# variance to the floor; a floor at a plausible label-noise level keeps the
# member variances comparable and the training stable.
AL_MODEL = ModelConfig(
    species_list=(1,), r_cut=3.2, n_layers=2, hidden_irreps="8x0e+4x1o+4x2e", feature_dim=8, l_max=2, head_mode="MVE8",
    variance_floor=1e-3, cov_jitter=1e-3,
)
AL_TRAIN = TrainConfig(
    epochs=300, batch_size=1000, max_lr=1e-2, loss="NLL_JEF", posterior="ensemble", n_members=4, lr_patience=50
)
AL_ARMS = (("bald_ef", 10), ("random", 10), ("random", 20))


@dataclass
class MorseRun:
    metrics: dict
    seconds: float
    log: list


def morse_smoke(n_frames=500, seed=0, cfg=MORSE_MODEL, tcfg=MORSE_TRAIN) -> MorseRun:
    """Fit the Morse dimer and report metrics on 50 fresh frames."""
    data, val = morse_dataset(n_frames, seed), morse_dataset(50, seed + 1)
    start = time.perf_counter()
    res = train(data, val, cfg, tcfg, seed)
    seconds = time.perf_counter() - start
    return MorseRun(evaluate(res.model, cfg, val).metrics, seconds, res.log)


@dataclass
class AlSeed:
    seed: int
    base_force_rmse: float
    force_rmse: dict = field(default_factory=dict)  # (strategy, budget) -> test force RMSE
    n_stretched: dict = field(default_factory=dict)  # (strategy, budget) -> picks from the stretched regime
    seconds: float = 0.0


def _bond(s) -> float:
    return float(np.linalg.norm(s.positions[1] - s.positions[0]))


def al_study(seed: int, cfg=AL_MODEL, tcfg=AL_TRAIN, arms=AL_ARMS) -> AlSeed:
    """One seed of the two-regime study.

    An ensemble trained on short bonds scores the pool once per arm; every
    arm retrains from scratch with the same seed so only the acquired data
    differ between arms.
    """
    start = time.perf_counter()
    train_set, pool, test = two_regime_sets(seed)
    base = train(train_set, [], cfg, tcfg, seed).model

    def metrics(post):
        return evaluate(post, cfg, test).metrics

    def retrain(structures):
        return train(structures, [], cfg, tcfg, seed + 100).model

    out = AlSeed(seed, metrics(base)["force_rmse"])
    for strategy, budget in arms:
        r = al_round(train_set, pool, budget, strategy, base, cfg, retrain, metrics, seed=seed)
        out.force_rmse[(strategy, budget)] = r.metrics["force_rmse"]
        out.n_stretched[(strategy, budget)] = sum(_bond(s) >= OOD_RANGE[0] for s in r.train[len(train_set) :])
    out.seconds = time.perf_counter() - start
    return out


def al_verdict(runs) -> dict:
    """Median comparison at equal budget and per-seed wins against twice the budget."""
    bald = np.array([r.force_rmse[("bald_ef", 10)] for r in runs])
    rand10 = np.array([r.force_rmse[("random", 10)] for r in runs])
    rand20 = np.array([r.force_rmse[("random", 20)] for r in runs])
    return {
        "median_bald_ef_10": float(np.median(bald)),
        "median_random_10": float(np.median(rand10)),
        "median_random_20": float(np.median(rand20)),
        "wins_vs_random_20": int(np.sum(bald <= rand20)),
    }
