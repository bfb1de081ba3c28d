"""Atomic structures, neighbour lists and the radial basis.

Cells are stored with lattice vectors as rows (the extended-XYZ
convention); a periodic image of atom j sits at ``r_j + shift @ cell``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import BadCell, DegenerateEdge, DomainError, ShapeError

DTYPE = torch.float64


@dataclass
class AtomicStructure:
    positions: np.ndarray
    species: np.ndarray
    cell: Optional[np.ndarray] = None
    pbc: tuple = (False, False, False)
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        self.species = np.array(self.species, dtype=np.int64).reshape(-1)
        if len(self.positions) < 1:
            raise ShapeError("a structure needs at least one atom")
        if len(self.species) != len(self.positions):
            raise ShapeError("species and positions disagree on the atom count")
        self.pbc = tuple(bool(b) for b in self.pbc)
        if len(self.pbc) != 3:
            raise ShapeError("pbc needs three flags")
        if self.cell is not None:
            self.cell = np.array(self.cell, dtype=np.float64).reshape(3, 3)
        if any(self.pbc):
            if self.cell is None or abs(np.linalg.det(self.cell)) <= 1e-10:
                raise BadCell("periodic structure needs a non-singular cell")
        if self.forces is not None:
            self.forces = np.array(self.forces, dtype=np.float64)
            if self.forces.shape != self.positions.shape:
                raise ShapeError("forces must match positions in shape")
        if self.energy is not None:
            self.energy = float(self.energy)

    def __len__(self):
        return len(self.positions)

    @property
    def is_periodic(self) -> bool:
        return any(self.pbc)

    @property
    def volume(self) -> float:
        if self.cell is None:
            raise BadCell("structure has no cell")
        return abs(float(np.linalg.det(self.cell)))

    def copy(self, **changes) -> "AtomicStructure":
        fields = dict(
            positions=self.positions.copy(),
            species=self.species.copy(),
            cell=None if self.cell is None else self.cell.copy(),
            pbc=self.pbc,
            energy=self.energy,
            forces=None if self.forces is None else self.forces.copy(),
            info=dict(self.info),
        )
        fields.update(changes)
        return AtomicStructure(**fields)


@dataclass(frozen=True)
class NeighborList:
    centers: np.ndarray  # (E,) int
    neighbors: np.ndarray  # (E,) int
    shifts: np.ndarray  # (E, 3) int
    vectors: np.ndarray  # (E, 3) r_j + shift @ cell - r_i
    distances: np.ndarray  # (E,)
    r_cut: float

    def __len__(self):
        return len(self.centers)

    @property
    def edges(self) -> list:
        return [(int(i), int(j), tuple(int(s) for s in k)) for i, j, k in zip(self.centers, self.neighbors, self.shifts)]


def _shift_ranges(s: AtomicStructure, r_cut: float) -> list:
    ranges = []
    if not s.is_periodic:
        return [range(0, 1)] * 3
    cell = s.cell
    volume = abs(np.linalg.det(cell))
    frac = s.positions @ np.linalg.inv(cell)
    for k in range(3):
        if not s.pbc[k]:
            ranges.append(range(0, 1))
            continue
        a, b = cell[(k + 1) % 3], cell[(k + 2) % 3]
        spacing = volume / np.linalg.norm(np.cross(a, b))
        spread = frac[:, k].max() - frac[:, k].min()
        n = int(math.ceil(r_cut / spacing + spread))
        ranges.append(range(-n, n + 1))
    return ranges


def build_neighbor_list(s: AtomicStructure, r_cut: float, max_neighbors: Optional[int] = None) -> NeighborList:
    """All directed pairs (i, j, shift) with 0 < |r_ij| <= r_cut.

    Edges are ordered by centre, then (distance, neighbour index, shift);
    ``max_neighbors`` keeps the first that many per centre in that order.
    """
    if r_cut <= 0:
        raise DomainError("r_cut must be positive")
    if s.is_periodic and (s.cell is None or abs(np.linalg.det(s.cell)) <= 1e-10):
        raise BadCell("singular cell")
    pos = s.positions
    n = len(pos)
    shifts = np.array(list(itertools.product(*_shift_ranges(s, r_cut))), dtype=np.int64)
    offsets = shifts @ s.cell if s.is_periodic else np.zeros((1, 3))
    # vec[k, i, j] = r_j + offset_k - r_i
    vec = pos[None, None, :, :] - pos[None, :, None, :] + offsets[:, None, None, :]
    dist = np.sqrt(np.einsum("kijx,kijx->kij", vec, vec))
    keep = dist <= r_cut
    self_image = np.all(shifts == 0, axis=1)
    keep[self_image] &= ~np.eye(n, dtype=bool)
    k_idx, i_idx, j_idx = np.nonzero(keep)
    d = dist[k_idx, i_idx, j_idx]
    sh = shifts[k_idx]
    order = np.lexsort((sh[:, 2], sh[:, 1], sh[:, 0], j_idx, d, i_idx))
    i_idx, j_idx, k_idx, d, sh = i_idx[order], j_idx[order], k_idx[order], d[order], sh[order]
    if max_neighbors is not None:
        rank = np.zeros(len(i_idx), dtype=np.int64)
        if len(i_idx):
            starts = np.r_[0, np.nonzero(np.diff(i_idx))[0] + 1]
            counts = np.diff(np.r_[starts, len(i_idx)])
            rank = np.arange(len(i_idx)) - np.repeat(starts, counts)
        sel = rank < max_neighbors
        i_idx, j_idx, k_idx, d, sh = i_idx[sel], j_idx[sel], k_idx[sel], d[sel], sh[sel]
    return NeighborList(
        centers=i_idx.astype(np.int64),
        neighbors=j_idx.astype(np.int64),
        shifts=sh.astype(np.int64).reshape(-1, 3),
        vectors=vec[k_idx, i_idx, j_idx].reshape(-1, 3),
        distances=d,
        r_cut=float(r_cut),
    )


def edge_vectors(s: AtomicStructure, nl: NeighborList, positions=None, cell=None):
    """Unit vectors and lengths of every edge as (possibly differentiable)
    tensors.  ``positions``/``cell`` override the structure's arrays so that
    gradients can flow back to them."""
    pos = torch.as_tensor(s.positions if positions is None else positions, dtype=DTYPE)
    vec = pos[nl.neighbors] - pos[nl.centers]
    if s.is_periodic or cell is not None:
        h = torch.as_tensor(s.cell if cell is None else cell, dtype=DTYPE)
        vec = vec + torch.as_tensor(nl.shifts, dtype=DTYPE) @ h
    length = torch.linalg.norm(vec, dim=-1)
    if len(length) and bool((length.detach() == 0).any()):
        raise DegenerateEdge("zero-length edge")
    return vec / length.unsqueeze(-1), length


# ---------------------------------------------------------------------------
# radial basis

ENVELOPE_ORDER = 6


def envelope(u, p: int = ENVELOPE_ORDER):
    """Polynomial cutoff: 1 at u=0, zero value/first/second derivative at u=1."""
    a = (p + 1) * (p + 2) / 2
    b = p * (p + 2)
    c = p * (p + 1) / 2
    return 1 - a * u**p + b * u ** (p + 1) - c * u ** (p + 2)


def envelope_derivative(u, p: int = ENVELOPE_ORDER):
    a = (p + 1) * (p + 2) / 2
    b = p * (p + 2)
    c = p * (p + 1) / 2
    return -a * p * u ** (p - 1) + b * (p + 1) * u**p - c * (p + 2) * u ** (p + 1)


def bessel_basis(r, n_basis: int, r_cut: float):
    """B_n(r / r_cut) * f_env(r) for n = 1..n_basis, shape (..., n_basis).

    Accepts numpy arrays or torch tensors.  With j0(z) = sin z / z and
    |j1(n pi)| = 1 / (n pi) the basis is sqrt(2/rc^3) sin(n pi x) / x.
    """
    is_torch = isinstance(r, torch.Tensor)
    lib = torch if is_torch else np
    r_arr = r if is_torch else np.asarray(r, dtype=np.float64)
    if (r_arr <= 0).any():
        raise DomainError("bessel_basis needs r > 0")
    x = r_arr / r_cut
    n = lib.arange(1, n_basis + 1, dtype=DTYPE) if is_torch else np.arange(1, n_basis + 1, dtype=np.float64)
    xs = x[..., None]
    values = math.sqrt(2.0 / r_cut**3) * lib.sin(n * math.pi * xs) / xs
    env = envelope(x) * (x < 1.0) if not is_torch else torch.where(x < 1.0, envelope(x), torch.zeros_like(x))
    return values * env[..., None]


def bessel_basis_derivative(r, n_basis: int, r_cut: float) -> np.ndarray:
    """Analytic d/dr of :func:`bessel_basis` (numpy)."""
    r = np.asarray(r, dtype=np.float64)
    if (r <= 0).any():
        raise DomainError("bessel_basis needs r > 0")
    x = r / r_cut
    n = np.arange(1, n_basis + 1, dtype=np.float64)
    xs = x[..., None]
    pref = math.sqrt(2.0 / r_cut**3)
    b = pref * np.sin(n * math.pi * xs) / xs
    db_dx = pref * (n * math.pi * np.cos(n * math.pi * xs) * xs - np.sin(n * math.pi * xs)) / xs**2
    inside = (x < 1.0)[..., None]
    env = envelope(xs)
    denv = envelope_derivative(xs)
    return np.where(inside, (db_dx * env + b * denv) / r_cut, 0.0)
