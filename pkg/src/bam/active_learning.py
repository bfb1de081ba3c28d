"""BALD acquisition scores and budgeted pool selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BudgetTooLarge, DomainError, ShapeError
from .posterior import aggregate_cov

STRATEGIES = ("random", "bald_e", "bald_f", "bald_ef")


def bald_energy(means, variances) -> np.ndarray:
    """0.5 [ln var_total - mean_m ln var_m] over members on axis 0.

    Variances are measured relative to the first member so identical
    members give exactly zero.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.shape != variances.shape or means.shape[0] < 2:
        raise ShapeError("need matching (M, ...) means and variances with M >= 2")
    if np.any(variances <= 0):
        raise DomainError("member variances must be positive")
    ref = variances[0]
    ratio = variances / ref
    spread = ((means - means.mean(axis=0)) ** 2).mean(axis=0) / ref
    return 0.5 * (np.log(ratio.mean(axis=0) + spread) - np.log(ratio).mean(axis=0))


def _logdet_psd(cov: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DomainError("force covariance is not positive definite") from None
    return 2 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)


def bald_force_atoms(means, covs) -> np.ndarray:
    """Per-atom 0.5 [ln det S_total - mean_m ln det S_m]; means (M, N, 3)."""
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    if means.shape[0] < 2 or covs.shape != means.shape + (3,):
        raise ShapeError("need (M, N, 3) means and (M, N, 3, 3) covariances with M >= 2")
    _, total, _, _ = aggregate_cov(means, covs)
    return 0.5 * (_logdet_psd(total) - _logdet_psd(covs).mean(axis=0))


def bald_force(means, covs, atom_struct=None, n_structs: Optional[int] = None, reduce: str = "max") -> np.ndarray:
    """Structure-level force BALD: max (or mean) of the per-atom scores."""
    per_atom = bald_force_atoms(means, covs)
    if atom_struct is None:
        atom_struct = np.zeros(len(per_atom), dtype=np.int64)
    atom_struct = np.asarray(atom_struct)
    n = int(atom_struct.max()) + 1 if n_structs is None else n_structs
    if reduce == "max":
        out = np.full(n, -np.inf)
        np.maximum.at(out, atom_struct, per_atom)
    elif reduce == "mean":
        out = np.bincount(atom_struct, weights=per_atom, minlength=n) / np.bincount(atom_struct, minlength=n)
    else:
        raise ValueError("reduce must be 'max' or 'mean'")
    return out


@dataclass(frozen=True)
class AcquisitionRecord:
    structure_id: str
    bald_energy: float
    bald_force: float
    selected_by: str


def score_pool(moments: dict, ids: Sequence, reduce: str = "max") -> dict:
    """Energy and force BALD per pool structure from stacked member outputs."""
    be = bald_energy(moments["energy"], moments["energy_var"])
    bf = bald_force(moments["forces"], moments["force_cov"], moments["atom_struct"], len(ids), reduce)
    return {"ids": list(ids), "bald_e": be, "bald_f": bf}


def _top(ids, scores, k, exclude=()):
    order = sorted((i for i in range(len(ids)) if ids[i] not in exclude), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order[:k]]


def normalize_strategy(strategy: str) -> str:
    key = strategy.lower()
    if key not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    return key


def select(scores: dict, strategy: str, k: int, seed: int = 0) -> list:
    """Pick k pool ids.  Returns AcquisitionRecords in selection order."""
    strategy = normalize_strategy(strategy)
    ids = list(scores["ids"])
    be = np.asarray(scores["bald_e"], dtype=np.float64)
    bf = np.asarray(scores["bald_f"], dtype=np.float64)
    if k < 0:
        raise ValueError("budget must be non-negative")
    if k > len(ids):
        raise BudgetTooLarge(f"budget {k} exceeds pool size {len(ids)}")
    lookup = {sid: n for n, sid in enumerate(ids)}
    if strategy == "random":
        picks = [(ids[i], "random") for i in np.random.default_rng(seed).choice(len(ids), size=k, replace=False)]
    elif strategy == "bald_e":
        picks = [(sid, "bald_e") for sid in _top(ids, be, k)]
    elif strategy == "bald_f":
        picks = [(sid, "bald_f") for sid in _top(ids, bf, k)]
    else:
        first = _top(ids, be, math.ceil(k / 2))
        rest = _top(ids, bf, k - len(first), exclude=set(first))
        picks = [(sid, "bald_e") for sid in first] + [(sid, "bald_f") for sid in rest]
    return [AcquisitionRecord(sid, float(be[lookup[sid]]), float(bf[lookup[sid]]), tag) for sid, tag in picks]


def manifest_rows(records: Sequence[AcquisitionRecord]) -> list:
    return [(r.structure_id, r.bald_energy, r.bald_force, r.selected_by) for r in records]


MANIFEST_HEADER = ("id", "bald_e", "bald_f", "strategy")


@dataclass
class RoundResult:
    train: list
    pool: list
    posterior: object
    metrics: dict
    records: list


def structure_ids(structures: Sequence) -> list:
    return [str(s.info.get("id", n)) for n, s in enumerate(structures)]


def al_round(
    train_set: Sequence,
    pool: Sequence,
    budget: int,
    strategy: str,
    posterior,
    cfg,
    retrain: Callable[[list], object],
    evaluate: Callable[[object], dict],
    seed: int = 0,
    n_samples: int = 10,
) -> RoundResult:
    """Score the pool with ``posterior``, move the selection into the
    training set (appended in pool order) and retrain with
    ``retrain(new_train)``.

    ``evaluate(posterior)`` returns the metrics dict; with a zero budget the
    posterior is kept and evaluated as is.
    """
    from .posterior import member_moments

    train_set, pool = list(train_set), list(pool)
    if budget == 0:
        return RoundResult(train_set, pool, posterior, evaluate(posterior), [])
    ids = structure_ids(pool)
    if len(set(ids)) != len(ids):
        raise ValueError("pool structures need unique ids")
    strategy = normalize_strategy(strategy)
    if strategy == "random":
        scores = {"ids": ids, "bald_e": np.zeros(len(ids)), "bald_f": np.zeros(len(ids))}
    else:
        moments = member_moments(posterior, cfg, pool, n_samples, np.random.default_rng(seed))
        scores = score_pool(moments, ids)
    records = select(scores, strategy, budget, seed)
    chosen = {r.structure_id for r in records}
    new_train = train_set + [s for sid, s in zip(ids, pool) if sid in chosen]
    new_pool = [s for sid, s in zip(ids, pool) if sid not in chosen]
    new_posterior = retrain(new_train)
    return RoundResult(new_train, new_pool, new_posterior, evaluate(new_posterior), records)
