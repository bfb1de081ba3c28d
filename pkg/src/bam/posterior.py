"""Approximate posteriors over the flat parameter vector.

Every state stores parameters as float64 numpy vectors in the order of
``model.param_shapes``.  Each kind knows how to produce the parameter
sets a prediction is averaged over (members or samples); predictive
aggregation is Gaussian moment matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .errors import DivergedGradient, NoData, NotReady, ShapeError
from .model import ModelConfig, ModelParams, PredictiveDistribution, collate, is_last_layer_param, run

DTYPE = torch.float64


# ---------------------------------------------------------------------------
# moment matching


class Aggregate(NamedTuple):
    mean: np.ndarray
    total: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray


def de_aggregate(means, variances) -> Aggregate:
    """Collapse a Gaussian mixture (members along axis 0) to one Gaussian.

    total = mean(var_m + mu_m^2) - mu*^2, evaluated as
    mean(var_m) + var(mu_m) with the means shifted by the first member, so
    identical members give exactly zero epistemic variance.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.shape != variances.shape:
        raise ShapeError("means and variances must have the same shape")
    if means.shape[0] < 1:
        raise NoData("no members to aggregate")
    shifted = means - means[0]
    offset = shifted.mean(axis=0)
    mu = means[0] + offset
    aleatoric = variances.mean(axis=0)
    epistemic = ((shifted - offset) ** 2).mean(axis=0)
    return Aggregate(mu, aleatoric + epistemic, aleatoric, epistemic)


def aggregate_cov(means, covs):
    """Multivariate moment matching: mean(S_m + mu_m mu_m^T) - mu* mu*^T.

    ``means`` has shape (M, ..., d) and ``covs`` (M, ..., d, d).  Returns
    (mean, total, aleatoric, epistemic) with the outer-product term
    centred before averaging.
    """
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    shifted = means - means[0]
    offset = shifted.mean(axis=0)
    mu = means[0] + offset
    dev = shifted - offset
    epistemic = np.einsum("m...i,m...j->...ij", dev, dev) / means.shape[0]
    aleatoric = covs.mean(axis=0)
    return mu, aleatoric + epistemic, aleatoric, epistemic


# ---------------------------------------------------------------------------
# deep ensemble


@dataclass
class EnsembleState:
    members: list  # flat parameter vectors
    kind: str = "ensemble"

    def __post_init__(self):
        self.members = [np.asarray(m, dtype=np.float64) for m in self.members]
        if len(self.members) < 2:
            raise ShapeError("an ensemble needs at least two members")
        if len({m.shape for m in self.members}) != 1:
            raise ShapeError("ensemble members disagree in size")

    def parameter_sets(self, n_samples=None, rng=None) -> list:
        return list(self.members)


# ---------------------------------------------------------------------------
# SWAG


@dataclass
class SwagState:
    mean: np.ndarray
    sq_mean: np.ndarray
    deviations: list = field(default_factory=list)
    n_collected: int = 0
    max_rank: int = 20
    kind: str = "swag"

    @classmethod
    def empty(cls, n_params: int, max_rank: int = 20) -> "SwagState":
        if max_rank < 2:
            raise ValueError("max_rank must be at least 2")
        return cls(np.zeros(n_params), np.zeros(n_params), [], 0, max_rank)

    @property
    def diag(self) -> np.ndarray:
        return np.clip(self.sq_mean - self.mean**2, 0.0, None)

    def deviation_matrix(self) -> np.ndarray:
        return np.stack(self.deviations, axis=1) if self.deviations else np.zeros((len(self.mean), 0))

    def parameter_sets(self, n_samples: int, rng: np.random.Generator) -> list:
        return [swag_sample(self, rng) for _ in range(n_samples)]


def swag_collect(state: SwagState, theta) -> SwagState:
    """Fold one snapshot into the running moments.

    The stored deviation is taken against the mean after this snapshot is
    included.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != state.mean.shape:
        raise ShapeError(f"snapshot has shape {theta.shape}, state expects {state.mean.shape}")
    n = state.n_collected
    # incremental form keeps constant snapshots exact
    mean = state.mean + (theta - state.mean) / (n + 1)
    sq_mean = state.sq_mean + (theta**2 - state.sq_mean) / (n + 1)
    deviations = (list(state.deviations) + [theta - mean])[-state.max_rank :]
    return replace(state, mean=mean, sq_mean=sq_mean, deviations=deviations, n_collected=n + 1)


def swag_sample(state: SwagState, rng: np.random.Generator) -> np.ndarray:
    """theta_SWA + sqrt(diag / 2) z1 + D z2 / sqrt(2 (K' - 1))."""
    if state.n_collected < 2 or len(state.deviations) < 2:
        raise NotReady("SWAG needs at least two collected snapshots")
    D = state.deviation_matrix()
    k = D.shape[1]
    z1 = rng.standard_normal(len(state.mean))
    z2 = rng.standard_normal(k)
    return state.mean + np.sqrt(state.diag / 2.0) * z1 + (D @ z2) / math.sqrt(2.0 * (k - 1))


def swag_covariance(state: SwagState) -> np.ndarray:
    """Dense covariance of the sampling law (for small problems and tests)."""
    D = state.deviation_matrix()
    k = D.shape[1]
    return np.diag(state.diag / 2.0) + D @ D.T / (2.0 * (k - 1))


# ---------------------------------------------------------------------------
# IVON


@dataclass(frozen=True)
class IvonHyper:
    lr: float = 0.05
    beta1: float = 0.9
    rho: float = 1e-5
    delta: float = 1e-4
    ess: float = 1e4
    h0: float = 1.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 < self.rho <= 1):
            raise ValueError("need 0 <= beta1 < 1 and 0 < rho <= 1")
        if self.delta <= 0 or self.ess <= 0 or self.lr <= 0 or self.h0 < 0:
            raise ValueError("lr, delta and ess must be positive and h0 non-negative")


@dataclass
class IvonState:
    m: np.ndarray
    h: np.ndarray
    g: np.ndarray
    hyper: IvonHyper = IvonHyper()
    t: int = 0
    kind: str = "ivon"

    @classmethod
    def init(cls, m, hyper: IvonHyper = IvonHyper()) -> "IvonState":
        m = np.array(m, dtype=np.float64)
        return cls(m, np.full_like(m, hyper.h0), np.zeros_like(m), hyper, 0)

    @property
    def sigma(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.hyper.ess * (self.h + self.hyper.delta))

    def parameter_sets(self, n_samples: int, rng: np.random.Generator) -> list:
        return [self.m + self.sigma * rng.standard_normal(len(self.m)) for _ in range(n_samples)]


def ivon_step(state: IvonState, grad_fn: Callable, rng: Optional[np.random.Generator] = None, theta=None) -> IvonState:
    """One variational online Newton step with a single posterior sample.

    ``theta`` overrides the sample (used to reproduce hand-computed steps);
    otherwise theta = m + sigma * z with z from ``rng``.
    """
    hp = state.hyper
    sigma = state.sigma
    if theta is None:
        if rng is None:
            raise ValueError("need an rng or an explicit sample")
        theta = state.m + sigma * rng.standard_normal(len(state.m))
    theta = np.asarray(theta, dtype=np.float64)
    g_hat = np.asarray(grad_fn(theta), dtype=np.float64)
    if not np.all(np.isfinite(g_hat)):
        raise DivergedGradient(f"non-finite gradient at step {state.t + 1}")
    h_hat = g_hat * (theta - state.m) / sigma**2
    t = state.t + 1
    g = hp.beta1 * state.g + (1 - hp.beta1) * g_hat
    h = (1 - hp.rho) * state.h + hp.rho * h_hat + 0.5 * hp.rho**2 * (state.h - h_hat) ** 2 / (state.h + hp.delta)
    g_bar = g / (1 - hp.beta1**t)
    m = state.m - hp.lr * (g_bar + hp.delta * state.m) / (h + hp.delta)
    return replace(state, m=m, h=h, g=g, t=t)


# ---------------------------------------------------------------------------
# Laplace (diagonal GGN)


@dataclass
class LaplaceState:
    theta_map: np.ndarray  # full flat vector
    mask: np.ndarray  # which entries carry a posterior
    ggn_diag: np.ndarray  # over the masked entries
    prior_precision: float = 1.0
    kind: str = "laplace"

    def __post_init__(self):
        if self.prior_precision <= 0:
            raise ValueError("prior precision must be positive")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ggn_diag.shape != (int(self.mask.sum()),):
            raise ShapeError("ggn_diag must cover exactly the masked parameters")

    @property
    def precision(self) -> np.ndarray:
        return self.ggn_diag + self.prior_precision

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        theta = self.theta_map.copy()
        theta[self.mask] += rng.standard_normal(int(self.mask.sum())) / np.sqrt(self.precision)
        return theta

    def parameter_sets(self, n_samples: int, rng: np.random.Generator) -> list:
        return [self.sample(rng) for _ in range(n_samples)]


def ggn_diagonal(output_fn: Callable, theta, data: Iterable, precision_fn: Callable) -> np.ndarray:
    """diag sum_n J_n^T Lambda_n J_n.

    ``output_fn(theta, x)`` returns the model outputs for one datum as a
    1-D tensor, ``precision_fn(x)`` the likelihood Hessian in output space
    (scalar, vector of diagonal entries or dense matrix).
    """
    theta = torch.as_tensor(np.asarray(theta, dtype=np.float64))
    total = torch.zeros_like(theta)
    seen = 0
    for x in data:
        seen += 1
        J = torch.autograd.functional.jacobian(lambda th: output_fn(th, x).reshape(-1), theta)
        lam = precision_fn(x)
        lam = lam.to(DTYPE) if isinstance(lam, torch.Tensor) else torch.tensor(np.asarray(lam, dtype=np.float64))
        if lam.dim() == 0:
            total += lam * (J**2).sum(0)
        elif lam.dim() == 1:
            total += (lam[:, None] * J**2).sum(0)
        else:
            total += torch.einsum("ap,ab,bp->p", J, lam, J)
    if seen == 0:
        raise NoData("the Laplace fit needs at least one datum")
    return total.numpy()


def _block_precision(out: dict, n_atoms: int, noise_var: float) -> torch.Tensor:
    """Output-space likelihood Hessian for (energy, forces.flatten())."""
    lam = torch.zeros(1 + 3 * n_atoms, 1 + 3 * n_atoms, dtype=DTYPE)
    lam[0, 0] = 1.0 / (out["energy_var"][0] if "energy_var" in out else noise_var)
    if "force_cov" in out:
        inv = torch.linalg.inv(out["force_cov"])
    else:
        inv = torch.eye(3, dtype=DTYPE).expand(n_atoms, 3, 3) / noise_var
    for i in range(n_atoms):
        lam[1 + 3 * i : 4 + 3 * i, 1 + 3 * i : 4 + 3 * i] = inv[i]
    return lam


def laplace_fit(
    cfg: ModelConfig,
    theta_map,
    structures: Sequence,
    prior_precision: float = 1.0,
    noise_var: float = 1.0,
    select: Callable = is_last_layer_param,
) -> LaplaceState:
    """Diagonal GGN over the selected parameters (by default the energy
    readout weights and species shifts) with Gaussian likelihood curvature
    from the model's own variance heads, or ``noise_var`` without them."""
    if len(structures) == 0:
        raise NoData("the Laplace fit needs calibration structures")
    theta_map = np.asarray(theta_map, dtype=np.float64)
    base = ModelParams.from_flat(cfg, theta_map)
    mask = base.slice_of(cfg, select)
    fixed = torch.as_tensor(theta_map)
    idx = torch.as_tensor(np.nonzero(mask)[0])
    batches = {}

    def outputs(sub, k):
        flat = fixed.index_put((idx,), sub)
        out = run(batches[k], cfg, ModelParams.from_flat(cfg, flat), forces=True, create_graph=True)
        return torch.cat([out["energy"], out["forces"].reshape(-1)])

    def precision(k):
        with torch.no_grad():
            out = run(batches[k], cfg, base, forces=False)
        return _block_precision(out, batches[k].n_atoms, noise_var)

    for k, s in enumerate(structures):
        batches[k] = collate([s], cfg)
    ggn = ggn_diagonal(outputs, theta_map[mask], range(len(structures)), precision)
    return LaplaceState(theta_map, mask, ggn, prior_precision)


# ---------------------------------------------------------------------------
# predictive aggregation


def member_predictions(cfg: ModelConfig, thetas: Sequence, structures: Sequence, nls=None) -> list:
    """Per parameter set, the raw outputs of one batched evaluation."""
    batch = collate(structures, cfg, nls)
    results = []
    for theta in thetas:
        out = run(batch, cfg, ModelParams.from_flat(cfg, theta), forces=True)
        results.append({k: v.detach().numpy() for k, v in out.items()})
    return batch, results


def posterior_predict(
    posterior,
    cfg: ModelConfig,
    structures: Sequence,
    n_samples: int = 10,
    rng: Optional[np.random.Generator] = None,
    nls=None,
) -> list:
    """Moment-matched predictive distribution per structure.

    Members without variance heads contribute zero aleatoric variance.
    """
    if posterior.kind != "ensemble" and n_samples < 2:
        raise ValueError("sampling posteriors need n_samples >= 2")
    thetas = posterior.parameter_sets(n_samples, rng if rng is not None else np.random.default_rng(0))
    batch, outs = member_predictions(cfg, thetas, structures, nls)
    e_mean = np.stack([o["energy"] for o in outs])
    e_var = np.stack([o.get("energy_var", np.zeros_like(o["energy"])) for o in outs])
    f_mean = np.stack([o["forces"] for o in outs])
    f_cov = np.stack([o.get("force_cov", np.zeros(o["forces"].shape + (3,))) for o in outs])
    agg = de_aggregate(e_mean, e_var)
    f_mu, f_total, _, _ = aggregate_cov(f_mean, f_cov)
    atom_struct = batch.atom_struct.numpy()
    result = []
    for b in range(batch.n_structs):
        sel = atom_struct == b
        result.append(
            PredictiveDistribution(
                energy_mean=float(agg.mean[b]),
                force_mean=f_mu[sel],
                energy_var=float(agg.total[b]),
                force_cov=f_total[sel],
                energy_aleatoric=float(agg.aleatoric[b]),
                energy_epistemic=float(agg.epistemic[b]),
            )
        )
    return result


def member_moments(posterior, cfg: ModelConfig, structures: Sequence, n_samples: int = 10, rng=None, nls=None) -> dict:
    """Stacked per-member outputs for acquisition scoring.

    Returns energy (M, B), energy_var (M, B), forces (M, N, 3), force_cov
    (M, N, 3, 3) and atom_struct (N,)."""
    thetas = posterior.parameter_sets(n_samples, rng if rng is not None else np.random.default_rng(0))
    batch, outs = member_predictions(cfg, thetas, structures, nls)
    floor = cfg.variance_floor
    return {
        "energy": np.stack([o["energy"] for o in outs]),
        "energy_var": np.stack([o.get("energy_var", np.full_like(o["energy"], floor)) for o in outs]),
        "forces": np.stack([o["forces"] for o in outs]),
        "force_cov": np.stack(
            [o.get("force_cov", np.broadcast_to(cfg.cov_jitter * np.eye(3), o["forces"].shape + (3,))) for o in outs]
        ),
        "atom_struct": batch.atom_struct.numpy(),
    }
