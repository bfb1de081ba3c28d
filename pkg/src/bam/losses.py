"""Training objectives: MSE, energy-only NLL and the joint energy-force NLL.

All three share one reduction: per-structure terms (force terms summed
over atoms and components) averaged over the structures in the batch.
Parameter-independent constants such as ln(2 pi) are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import DomainError, MissingLabel, ShapeError

DTYPE = torch.float64
LOSS_KINDS = ("MSE", "NLL_E", "NLL_JEF")


@dataclass(frozen=True)
class LossWeights:
    energy: float = 1.0
    forces: float = 1.0

    def __post_init__(self):
        if self.energy < 0 or self.forces < 0:
            raise ValueError("loss weights must be non-negative")
        if self.energy == 0 and self.forces == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class Targets:
    energy: torch.Tensor  # (B,)
    forces: torch.Tensor  # (N, 3)
    atom_struct: torch.Tensor  # (N,)

    @property
    def n_structs(self) -> int:
        return self.energy.shape[0]


def targets(structures: Sequence) -> Targets:
    """Stack reference labels; every structure needs energy and forces."""
    for k, s in enumerate(structures):
        if s.energy is None or s.forces is None:
            raise MissingLabel(f"structure {k} lacks an energy or force label")
    return Targets(
        energy=torch.tensor([s.energy for s in structures], dtype=DTYPE),
        forces=torch.as_tensor(np.concatenate([s.forces for s in structures]), dtype=DTYPE),
        atom_struct=torch.as_tensor(np.concatenate([np.full(len(s), k) for k, s in enumerate(structures)])),
    )


def nll_gaussian(y, mu, var):
    """0.5 ln var + (y - mu)^2 / (2 var), elementwise."""
    y, mu, var = (torch.as_tensor(v, dtype=DTYPE) for v in (y, mu, var))
    if bool((var <= 0).any()):
        raise DomainError("variance must be positive")
    return 0.5 * torch.log(var) + (y - mu) ** 2 / (2 * var)


def _cholesky(cov: torch.Tensor) -> torch.Tensor:
    if cov.shape[-2:] != (3, 3):
        raise ShapeError("force covariance must be 3x3 per atom")
    if not torch.allclose(cov, cov.transpose(-1, -2), rtol=0, atol=1e-12 * (1 + float(cov.detach().abs().max()))):
        raise DomainError("force covariance is not symmetric")
    L, info = torch.linalg.cholesky_ex(cov)
    if bool((info != 0).any()):
        raise DomainError("force covariance is not positive definite")
    return L


def mahalanobis(residual, cov) -> torch.Tensor:
    """r^T cov^-1 r by a triangular solve, batched over leading axes."""
    residual = torch.as_tensor(residual, dtype=DTYPE)
    L = _cholesky(torch.as_tensor(cov, dtype=DTYPE))
    z = torch.linalg.solve_triangular(L, residual.unsqueeze(-1), upper=False).squeeze(-1)
    return (z**2).sum(-1)


def logdet(cov) -> torch.Tensor:
    L = _cholesky(torch.as_tensor(cov, dtype=DTYPE))
    return 2 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)


def force_nll(y_f, mu_f, cov):
    """(y - mu)^T cov^-1 (y - mu) + ln det cov, per atom."""
    y_f, mu_f, cov = (torch.as_tensor(v, dtype=DTYPE) for v in (y_f, mu_f, cov))
    L = _cholesky(cov)
    z = torch.linalg.solve_triangular(L, (y_f - mu_f).unsqueeze(-1), upper=False).squeeze(-1)
    return (z**2).sum(-1) + 2 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)


def _per_struct(values: torch.Tensor, atom_struct: torch.Tensor, n: int) -> torch.Tensor:
    return torch.zeros(n, dtype=DTYPE).index_add(0, atom_struct, values)


def _check(pred: dict, keys):
    missing = [k for k in keys if k not in pred]
    if missing:
        raise ShapeError(f"predictions lack {missing}; check the model head mode")


def nll_jef(pred: dict, tgt: Targets, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Mean over structures of
    w_E r_E^2 / var_E + w_F sum_atoms r_F^T Sigma^-1 r_F + ln var_E + sum_atoms ln det Sigma.
    """
    _check(pred, ("energy", "energy_var", "forces", "force_cov"))
    n = tgt.n_structs
    var = pred["energy_var"]
    e_term = (tgt.energy - pred["energy"]) ** 2 / var
    f_term = _per_struct(mahalanobis(tgt.forces - pred["forces"], pred["force_cov"]), tgt.atom_struct, n)
    log_terms = torch.log(var) + _per_struct(logdet(pred["force_cov"]), tgt.atom_struct, n)
    return (w.energy * e_term + w.forces * f_term + log_terms).mean()


def nll_e(pred: dict, tgt: Targets, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Joint loss with the force covariance pinned to the identity."""
    _check(pred, ("energy", "energy_var", "forces"))
    n = tgt.n_structs
    var = pred["energy_var"]
    e_term = (tgt.energy - pred["energy"]) ** 2 / var
    f_term = _per_struct(((tgt.forces - pred["forces"]) ** 2).sum(-1), tgt.atom_struct, n)
    return (w.energy * e_term + w.forces * f_term + torch.log(var)).mean()


def mse_loss(pred: dict, tgt: Targets, w: LossWeights = LossWeights()) -> torch.Tensor:
    """w_E (E - E_ref)^2 + w_F sum over atoms of |F - F_ref|^2, averaged over structures."""
    _check(pred, ("energy", "forces"))
    n = tgt.n_structs
    e_term = (tgt.energy - pred["energy"]) ** 2
    f_term = _per_struct(((tgt.forces - pred["forces"]) ** 2).sum(-1), tgt.atom_struct, n)
    return (w.energy * e_term + w.forces * f_term).mean()


def loss_fn(kind: str):
    try:
        return {"MSE": mse_loss, "NLL_E": nll_e, "NLL_JEF": nll_jef}[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}") from None


def required_head(kind: str) -> Optional[str]:
    return {"MSE": None, "NLL_E": "MVE2", "NLL_JEF": "MVE8"}[kind]
