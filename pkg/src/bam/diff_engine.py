"""Reverse-mode derivatives of the scalar energy.

The recorded graph is torch's define-by-run autograd graph, rebuilt on
every evaluation.  This module pins down the contract the rest of the
package relies on: scalar outputs only, explicit leaves, float64, and the
stress formula built from position and cell gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NoCell, NotScalar, UnknownLeaf

DTYPE = torch.float64


def leaf(value) -> torch.Tensor:
    """Register an array as a differentiable input."""
    return torch.tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE, requires_grad=True)


def grad(output: torch.Tensor, wrt: Sequence[torch.Tensor], create_graph: bool = False, retain_graph=None) -> list:
    """Gradients of a scalar with respect to registered leaves.

    Leaves that the output does not depend on get a zero gradient.
    """
    if not isinstance(output, torch.Tensor) or output.numel() != 1:
        raise NotScalar("grad needs a scalar output")
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, torch.Tensor) or not w.requires_grad:
            raise UnknownLeaf("input was not registered as a differentiable leaf")
    if not output.requires_grad:
        return [torch.zeros_like(w) for w in wrt]
    grads = torch.autograd.grad(
        output.reshape(()), wrt, create_graph=create_graph, retain_graph=retain_graph, allow_unused=True
    )
    return [torch.zeros_like(w) if g is None else g for w, g in zip(wrt, grads)]


def forces(energy: torch.Tensor, positions: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    (g,) = grad(energy.sum(), [positions], create_graph=create_graph, retain_graph=True if create_graph else None)
    return -g


def virial_stress(dE_dpos, dE_dcell, positions, cell) -> torch.Tensor:
    """S = (cell^T dE/dcell + sum_i r_i (x) dE/dr_i) / V for row-vector cells.

    This is dE/d(strain) per unit volume for the deformation
    r -> r (1 + eps), cell -> cell (1 + eps).
    """
    positions = torch.as_tensor(positions, dtype=DTYPE)
    cell = torch.as_tensor(cell, dtype=DTYPE)
    volume = torch.abs(torch.linalg.det(cell))
    return (cell.T @ dE_dcell + positions.T @ dE_dpos) / volume


def stress(s, energy_fn: Callable) -> np.ndarray:
    """Stress of a periodic structure in eV/A^3.

    ``energy_fn(positions, cell)`` must build the energy from the given
    tensors so both are leaves of the graph.
    """
    if not s.is_periodic or s.cell is None:
        raise NoCell("stress needs a periodic structure")
    pos = leaf(s.positions)
    cell = leaf(s.cell)
    energy = energy_fn(pos, cell)
    dpos, dcell = grad(energy, [pos, cell])
    return virial_stress(dpos, dcell, pos.detach(), cell.detach()).numpy()
