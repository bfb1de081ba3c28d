"""Training loops for the base model and each posterior kind, plus evaluation."""

from __future__ import annotations

import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import torch

from . import uq
from .errors import DivergedTraining, MissingLabel
from .io import substream
from .losses import LossWeights, loss_fn, required_head, targets
from .model import ModelConfig, ModelParams, collate, init_params, neighbor_lists, run, species_index
from .posterior import (
    EnsembleState,
    IvonHyper,
    IvonState,
    SwagState,
    ivon_step,
    laplace_fit,
    posterior_predict,
    swag_collect,
)

POSTERIORS = ("none", "ensemble", "swag", "ivon", "laplace")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    max_lr: float = 1e-2
    lr_factor: float = 0.5
    lr_patience: int = 10
    min_lr: float = 1e-6
    ema_decay: float = 0.99
    loss: str = "MSE"
    energy_weight: float = 1.0
    forces_weight: float = 1.0
    fit_species_energy: bool = True
    posterior: str = "none"
    n_members: int = 10
    jobs: int = 1
    swag_rank: int = 20
    swag_start: float = 0.6
    swag_per_iteration: bool = False
    ivon_lr: float = 0.05
    ivon_beta1: float = 0.9
    ivon_rho: float = 1e-5
    ivon_delta: float = 1e-4
    ivon_ess: Optional[float] = None
    ivon_h0: float = 1.0
    laplace_prior: float = 1.0
    n_samples: int = 10
    verbose: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.lr_patience < 1 or not 0 < self.lr_factor < 1:
            raise ValueError("need lr_patience >= 1 and lr_factor in (0, 1)")
        if self.loss not in ("MSE", "NLL_E", "NLL_JEF"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.posterior not in POSTERIORS:
            raise ValueError(f"posterior must be one of {POSTERIORS}")
        if self.posterior == "ensemble" and self.n_members < 2:
            raise ValueError("an ensemble needs n_members >= 2")
        if not 0 <= self.swag_start < 1 or self.swag_rank < 2:
            raise ValueError("need swag_start in [0, 1) and swag_rank >= 2")
        LossWeights(self.energy_weight, self.forces_weight)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.energy_weight, self.forces_weight)

    def ivon_hyper(self, n_train: int) -> IvonHyper:
        ess = self.ivon_ess if self.ivon_ess is not None else float(max(n_train, 1))
        return IvonHyper(self.ivon_lr, self.ivon_beta1, self.ivon_rho, self.ivon_delta, ess, self.ivon_h0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    model: object  # flat parameter vector or a posterior state
    log: list  # (epoch, train_loss, val_loss, lr) rows, member-major for ensembles
    params: np.ndarray  # the point estimate (EMA weights, IVON mean, member 0 ...)


class Ema:
    """Exponential moving average of a flat vector."""

    def __init__(self, value, decay: float):
        self.decay = decay
        self.value = torch.as_tensor(value, dtype=torch.float64).detach().clone()

    def update(self, value) -> torch.Tensor:
        self.value.mul_(self.decay).add_(torch.as_tensor(value, dtype=torch.float64).detach(), alpha=1 - self.decay)
        return self.value


LOG_HEADER = ("epoch", "train_loss", "val_loss", "lr")


def _check_labels(structures):
    for k, s in enumerate(structures):
        if s.energy is None or s.forces is None:
            raise MissingLabel(f"training structure {k} lacks labels")


def species_energy_fit(cfg: ModelConfig, structures: Sequence) -> np.ndarray:
    """Least-squares per-species energy from composition counts."""
    counts = np.zeros((len(structures), len(cfg.species_list)))
    for n, s in enumerate(structures):
        np.add.at(counts[n], species_index(cfg, s.species), 1.0)
    energies = np.array([s.energy for s in structures])
    return np.linalg.lstsq(counts, energies, rcond=None)[0]


def initial_params(cfg: ModelConfig, tcfg: TrainConfig, train_set: Sequence, seed: int, member: int = 0) -> ModelParams:
    params = init_params(cfg, substream(seed, "init", member))
    if tcfg.fit_species_energy and train_set:
        params.arrays["species_energy"] = torch.as_tensor(species_energy_fit(cfg, train_set))
    return params


def _flat(params: ModelParams) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in params.arrays.values()])


class _Loader:
    """Cached neighbour lists and targets; batches drawn from a seeded order."""

    def __init__(self, structures, cfg, batch_size):
        self.structures = list(structures)
        self.cfg = cfg
        self.nls = neighbor_lists(self.structures, cfg)
        self.batch_size = batch_size
        self._full = None

    def batches(self, rng: Optional[np.random.Generator]):
        n = len(self.structures)
        if self.batch_size >= n:
            if self._full is None:
                self._full = (collate(self.structures, self.cfg, self.nls), targets(self.structures))
            yield self._full
            return
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, self.batch_size):
            idx = order[start : start + self.batch_size]
            items = [self.structures[k] for k in idx]
            yield collate(items, self.cfg, [self.nls[k] for k in idx]), targets(items)


def _batch_loss(cfg, params, batch, tgt, kind, weights, create_graph=True):
    out = run(batch, cfg, params, forces=True, create_graph=create_graph)
    return loss_fn(kind)(out, tgt, weights)


def mean_loss(cfg, params: ModelParams, loader: _Loader, kind, weights) -> float:
    total, count = 0.0, 0
    for batch, tgt in loader.batches(None):
        loss = _batch_loss(cfg, params, batch, tgt, kind, weights, create_graph=False)
        total += float(loss.detach()) * batch.n_structs
        count += batch.n_structs
    return total / count


def _grad_flat(cfg, flat: torch.Tensor, batch, tgt, kind, weights):
    params = ModelParams.from_flat(cfg, flat, requires_grad=True)
    loss = _batch_loss(cfg, params, batch, tgt, kind, weights)
    (g,) = torch.autograd.grad(loss, [params.leaf], allow_unused=True)
    return loss.detach(), (torch.zeros_like(flat) if g is None else g)


def _log(tcfg, msg):
    if tcfg.verbose:
        print(msg, file=sys.stderr)


def train_member(
    train_set: Sequence,
    val_set: Sequence,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    seed: int,
    member: int = 0,
    swag: bool = False,
):
    """AMSGrad training of one parameter set.

    Returns (EMA flat parameters, log rows, SwagState or None).
    """
    _check_labels(train_set)
    need = required_head(tcfg.loss)
    if need == "MVE8" and cfg.head_mode != "MVE8" or need == "MVE2" and cfg.head_mode == "Base":
        raise ValueError(f"loss {tcfg.loss} needs head mode {need}, config has {cfg.head_mode}")
    params = initial_params(cfg, tcfg, train_set, seed, member)
    flat0 = _flat(params)
    if tcfg.epochs == 0:
        return flat0.numpy().copy(), [], None
    leaves = params.trainable()
    opt = torch.optim.Adam(leaves.arrays.values(), lr=tcfg.max_lr, betas=(0.9, 0.999), eps=1e-8, amsgrad=True)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=tcfg.lr_factor, patience=tcfg.lr_patience, threshold=1e-4, threshold_mode="rel",
        min_lr=tcfg.min_lr,
    )
    ema = Ema(flat0, tcfg.ema_decay)
    train_loader = _Loader(train_set, cfg, tcfg.batch_size)
    val_loader = _Loader(val_set, cfg, max(len(val_set), 1)) if val_set else None
    order_rng = substream(seed, "split", 1 + member)
    swag_state = SwagState.empty(len(flat0), tcfg.swag_rank) if swag else None
    swag_from = int(math.floor(tcfg.swag_start * tcfg.epochs))
    log = []
    for epoch in range(tcfg.epochs):
        total, count = 0.0, 0
        for batch, tgt in train_loader.batches(order_rng):
            opt.zero_grad(set_to_none=True)
            loss = _batch_loss(cfg, leaves, batch, tgt, tcfg.loss, tcfg.weights)
            if not torch.isfinite(loss):
                raise DivergedTraining(epoch)
            loss.backward()
            opt.step()
            current = _flat(leaves)
            ema.update(current)
            if swag_state is not None and tcfg.swag_per_iteration and epoch >= swag_from:
                swag_state = swag_collect(swag_state, current.numpy())
            total += float(loss.detach()) * batch.n_structs
            count += batch.n_structs
        if swag_state is not None and not tcfg.swag_per_iteration and epoch >= swag_from:
            swag_state = swag_collect(swag_state, _flat(leaves).numpy())
        train_loss = total / count
        ema_params = ModelParams.from_flat(cfg, ema.value)
        val_loss = mean_loss(cfg, ema_params, val_loader, tcfg.loss, tcfg.weights) if val_loader else float("nan")
        if not math.isfinite(train_loss):
            raise DivergedTraining(epoch)
        lr = opt.param_groups[0]["lr"]
        log.append((epoch, train_loss, val_loss, lr))
        sched.step(val_loss if val_loader else train_loss)
        _log(tcfg, f"member {member} epoch {epoch} train {train_loss:.6g} val {val_loss:.6g} lr {lr:.3g}")
    return ema.value.numpy().copy(), log, swag_state


def train_ivon(train_set, val_set, cfg: ModelConfig, tcfg: TrainConfig, seed: int):
    """IVON replaces AMSGrad; its mean m is the point estimate (no EMA)."""
    _check_labels(train_set)
    params = initial_params(cfg, tcfg, train_set, seed)
    state = IvonState.init(_flat(params).numpy(), tcfg.ivon_hyper(len(train_set)))
    if tcfg.epochs == 0:
        return state, []
    holder = torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=tcfg.ivon_lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        holder, mode="min", factor=tcfg.lr_factor, patience=tcfg.lr_patience, threshold=1e-4, threshold_mode="rel",
        min_lr=tcfg.min_lr,
    )
    noise_rng = substream(seed, "ivon")
    order_rng = substream(seed, "split", 1)
    train_loader = _Loader(train_set, cfg, tcfg.batch_size)
    val_loader = _Loader(val_set, cfg, max(len(val_set), 1)) if val_set else None
    log = []
    for epoch in range(tcfg.epochs):
        total, count = 0.0, 0
        for batch, tgt in train_loader.batches(order_rng):
            seen = {}

            def grad_fn(theta):
                loss, g = _grad_flat(cfg, torch.as_tensor(theta), batch, tgt, tcfg.loss, tcfg.weights)
                seen["loss"] = float(loss)
                return g.numpy()

            lr = holder.param_groups[0]["lr"]
            state.hyper = IvonHyper(lr, *[getattr(state.hyper, f) for f in ("beta1", "rho", "delta", "ess", "h0")])
            try:
                state = ivon_step(state, grad_fn, noise_rng)
            except FloatingPointError:
                raise DivergedTraining(epoch) from None
            total += seen["loss"] * batch.n_structs
            count += batch.n_structs
        train_loss = total / count
        if not math.isfinite(train_loss):
            raise DivergedTraining(epoch)
        mean_params = ModelParams.from_flat(cfg, state.m)
        val_loss = mean_loss(cfg, mean_params, val_loader, tcfg.loss, tcfg.weights) if val_loader else float("nan")
        lr = holder.param_groups[0]["lr"]
        log.append((epoch, train_loss, val_loss, lr))
        sched.step(val_loss if val_loader else train_loss)
        _log(tcfg, f"ivon epoch {epoch} train {train_loss:.6g} val {val_loss:.6g} lr {lr:.3g}")
    return state, log


def _member_job(args):
    train_set, val_set, cfg, tcfg, seed, member = args
    torch.set_num_threads(1)
    theta, log, _ = train_member(train_set, val_set, cfg, tcfg, seed, member)
    return theta, log


def train(train_set: Sequence, val_set: Sequence, cfg: ModelConfig, tcfg: TrainConfig, seed: int = 0) -> TrainResult:
    """Run the loop selected by ``tcfg.posterior``."""
    kind = tcfg.posterior
    if kind == "none":
        theta, log, _ = train_member(train_set, val_set, cfg, tcfg, seed)
        return TrainResult(theta, log, theta)
    if kind == "ensemble":
        jobs = [(list(train_set), list(val_set), cfg, tcfg, seed, m) for m in range(tcfg.n_members)]
        if tcfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=tcfg.jobs) as pool:
                results = list(pool.map(_member_job, jobs))
        else:
            results = [_member_job(j) for j in jobs]
        log = [(m, *row) for m, (_, member_log) in enumerate(results) for row in member_log]
        state = EnsembleState([theta for theta, _ in results])
        return TrainResult(state, log, state.members[0])
    if kind == "swag":
        theta, log, state = train_member(train_set, val_set, cfg, tcfg, seed, swag=True)
        if state is None:
            state = SwagState.empty(len(theta), tcfg.swag_rank)
        return TrainResult(state, log, state.mean if state.n_collected else theta)
    if kind == "ivon":
        state, log = train_ivon(train_set, val_set, cfg, tcfg, seed)
        return TrainResult(state, log, state.m)
    theta, log, _ = train_member(train_set, val_set, cfg, tcfg, seed)
    calib = list(val_set) if val_set else list(train_set)
    state = laplace_fit(cfg, theta, calib, tcfg.laplace_prior)
    return TrainResult(state, log, theta)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    metrics: dict
    energy: np.ndarray  # rows: (reference, predicted, predicted sd)
    forces: np.ndarray  # rows per component: (reference, predicted, predicted sd)
    ids: list


def predictions(model, cfg: ModelConfig, structures: Sequence, n_samples: int = 10, seed: int = 0) -> list:
    """Point predictions for a flat vector, aggregated ones for a posterior."""
    from .model import predict

    if isinstance(model, (np.ndarray, torch.Tensor)):
        return predict(structures, cfg, ModelParams.from_flat(cfg, model))
    return posterior_predict(model, cfg, structures, n_samples, substream(seed, "selection", 7))


def evaluate(model, cfg: ModelConfig, structures: Sequence, n_samples: int = 10, seed: int = 0, m_levels: int = 100) -> EvalReport:
    """RMSE/MAE of energies and force components, and calibration errors.

    Without predicted variances the calibration error uses unit standard
    deviations.
    """
    _check_labels(structures)
    preds = predictions(model, cfg, structures, n_samples, seed)
    e_rows, f_rows = [], []
    for s, p in zip(structures, preds):
        e_sd = math.sqrt(p.energy_var) if p.energy_var is not None else 1.0
        e_rows.append((s.energy, p.energy_mean, e_sd))
        f_sd = np.sqrt(p.force_var) if p.force_cov is not None else np.ones_like(p.force_mean)
        f_rows.append(np.stack([s.forces.reshape(-1), p.force_mean.reshape(-1), f_sd.reshape(-1)], axis=1))
    e = np.array(e_rows, dtype=np.float64)
    f = np.concatenate(f_rows)
    e_err, f_err = e[:, 1] - e[:, 0], f[:, 1] - f[:, 0]
    metrics = {
        "energy_rmse": float(np.sqrt(np.mean(e_err**2))),
        "energy_mae": float(np.mean(np.abs(e_err))),
        "force_rmse": float(np.sqrt(np.mean(f_err**2))),
        "force_mae": float(np.mean(np.abs(f_err))),
        "n_structures": len(structures),
    }
    if len(e) >= 2:
        metrics["energy_ce"] = uq.calibration_error(e_err, e[:, 2], m_levels)
    if len(f) >= 2:
        metrics["force_ce"] = uq.calibration_error(f_err, f[:, 2], m_levels)
    ids = [str(s.info.get("id", k)) for k, s in enumerate(structures)]
    return EvalReport(metrics, e, f, ids)
