"""Equivariant feature algebra in a real spherical-harmonic basis.

Conventions (fixed once, used everywhere):

* Real spherical harmonics, orthonormal on the unit sphere, no
  Condon-Shortley phase, components ordered m = -l..l.  For l = 1 this is
  ``sqrt(3/4pi) * (y, z, x)``.
* Parity is stored as +1 (even, "e") or -1 (odd, "o").
* Wigner matrices are defined by ``Y_l(R x) = D_l(R) Y_l(x)``; a feature
  block of shape (..., mult, 2l+1) rotates as ``block @ D_l(R).T``.
* Clebsch-Gordan tables are the real-basis coupling tensors
  ``C[m1, m2, M]`` normalised so that, for each M, ``sum_{m1,m2} C**2 = 1``
  (the coupling is an isometry).  The sign is fixed by making the largest
  entry of the ``l1 <= l2`` table positive; ``l1 > l2`` tables follow from
  the exchange rule ``C[l2,l1,L][m2,m1,M] = (-1)**(l1+l2-L) C[l1,l2,L][m1,m2,M]``.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import torch

from .errors import InvalidPath, NonUnitVector, ShapeError, UnsupportedDegree

L_MAX = 3
DTYPE = torch.float64


def _parity_char(p: int) -> str:
    return "e" if p == 1 else "o"


@dataclass(frozen=True)
class IrrepsSpec:
    """Multiplicities of O(3) irreps, e.g. ``IrrepsSpec.parse("8x0e+4x1o")``."""

    entries: tuple  # ((l, parity, mult), ...)

    def __post_init__(self):
        entries = tuple((int(l), int(p), int(m)) for l, p, m in self.entries)
        keys = [(l, p) for l, p, _ in entries]
        if len(set(keys)) != len(keys):
            raise ShapeError(f"duplicate (l, parity) keys in {entries}")
        for l, p, m in entries:
            if l < 0 or p not in (1, -1) or m < 1:
                raise ShapeError(f"bad irreps entry {(l, p, m)}")
        entries = tuple(sorted(entries, key=lambda e: (e[0], -e[1])))
        object.__setattr__(self, "entries", entries)

    @classmethod
    def parse(cls, text: str) -> "IrrepsSpec":
        entries = []
        for term in text.replace(" ", "").split("+"):
            if not term:
                continue
            match = re.fullmatch(r"(?:(\d+)x)?(\d+)([eo])", term)
            if match is None:
                raise ShapeError(f"cannot parse irreps term {term!r}")
            mult = int(match.group(1) or 1)
            entries.append((int(match.group(2)), 1 if match.group(3) == "e" else -1, mult))
        return cls(tuple(entries))

    @classmethod
    def from_dict(cls, mults: Mapping) -> "IrrepsSpec":
        return cls(tuple((l, p, m) for (l, p), m in mults.items() if m > 0))

    def __str__(self):
        return "+".join(f"{m}x{l}{_parity_char(p)}" for l, p, m in self.entries)

    @property
    def keys(self) -> list:
        return [(l, p) for l, p, _ in self.entries]

    @property
    def total_dim(self) -> int:
        return sum(m * (2 * l + 1) for l, _, m in self.entries)

    @property
    def lmax(self) -> int:
        return max(l for l, _, _ in self.entries)

    def mult(self, key) -> int:
        for l, p, m in self.entries:
            if (l, p) == tuple(key):
                return m
        return 0

    def __contains__(self, key) -> bool:
        return self.mult(key) > 0


class EquivariantFeature:
    """Blocks of real coefficients keyed by (l, parity).

    Each block has shape (*batch, mult, 2l+1); every block shares the same
    leading batch shape.  Instances are treated as immutable.
    """

    __slots__ = ("spec", "blocks")

    def __init__(self, spec: IrrepsSpec, blocks: Mapping):
        blocks = {tuple(k): torch.as_tensor(v, dtype=DTYPE) for k, v in blocks.items()}
        if set(blocks) != set(spec.keys):
            raise ShapeError(f"blocks {sorted(blocks)} do not match spec {spec}")
        batch = None
        for l, p, m in spec.entries:
            b = blocks[(l, p)]
            if b.dim() < 2 or tuple(b.shape[-2:]) != (m, 2 * l + 1):
                raise ShapeError(f"block {(l, p)} has shape {tuple(b.shape)}, expected (..., {m}, {2 * l + 1})")
            if batch is None:
                batch = b.shape[:-2]
            elif b.shape[:-2] != batch:
                raise ShapeError("inconsistent batch shapes across blocks")
            if not torch.isfinite(b).all():
                raise ShapeError(f"non-finite values in block {(l, p)}")
        self.spec = spec
        self.blocks = blocks

    @property
    def batch_shape(self):
        return next(iter(self.blocks.values())).shape[:-2]

    def __getitem__(self, key):
        return self.blocks[tuple(key)]

    def map_blocks(self, fn) -> "EquivariantFeature":
        return EquivariantFeature(self.spec, {k: fn(k, v) for k, v in self.blocks.items()})

    def scalars(self, parity: int = 1) -> torch.Tensor:
        """The l=0 block of given parity flattened to (*batch, mult)."""
        return self.blocks[(0, parity)][..., 0]

    def flatten(self) -> torch.Tensor:
        parts = [self.blocks[k].flatten(-2) for k in self.spec.keys]
        return torch.cat(parts, dim=-1)

    @classmethod
    def zeros(cls, spec: IrrepsSpec, batch=()) -> "EquivariantFeature":
        return cls(spec, {(l, p): torch.zeros(*batch, m, 2 * l + 1, dtype=DTYPE) for l, p, m in spec.entries})

    def __repr__(self):
        return f"EquivariantFeature({self.spec}, batch={tuple(self.batch_shape)})"


# ---------------------------------------------------------------------------
# spherical harmonics

_C0 = 0.5 * math.sqrt(1.0 / math.pi)
_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_C2a = 0.5 * math.sqrt(15.0 / math.pi)
_C2b = 0.25 * math.sqrt(5.0 / math.pi)
_C2c = 0.25 * math.sqrt(15.0 / math.pi)
_C3a = 0.25 * math.sqrt(35.0 / (2.0 * math.pi))
_C3b = 0.5 * math.sqrt(105.0 / math.pi)
_C3c = 0.25 * math.sqrt(21.0 / (2.0 * math.pi))
_C3d = 0.25 * math.sqrt(7.0 / math.pi)
_C3e = 0.25 * math.sqrt(105.0 / math.pi)


def sh_components(vec, l: int):
    """Real harmonic Y_l(vec) as a (..., 2l+1) array; vec assumed unit.

    Works for both numpy arrays and torch tensors.
    """
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    stack = torch.stack if isinstance(vec, torch.Tensor) else np.stack
    if l == 0:
        one = x * 0 + 1
        return stack([_C0 * one], -1)
    if l == 1:
        return stack([_C1 * y, _C1 * z, _C1 * x], -1)
    if l == 2:
        return stack(
            [
                _C2a * x * y,
                _C2a * y * z,
                _C2b * (2 * z * z - x * x - y * y),
                _C2a * x * z,
                _C2c * (x * x - y * y),
            ],
            -1,
        )
    if l == 3:
        r2 = x * x + y * y + z * z
        return stack(
            [
                _C3a * y * (3 * x * x - y * y),
                _C3b * x * y * z,
                _C3c * y * (5 * z * z - r2),
                _C3d * z * (5 * z * z - 3 * r2),
                _C3c * x * (5 * z * z - r2),
                _C3e * z * (x * x - y * y),
                _C3a * x * (x * x - 3 * y * y),
            ],
            -1,
        )
    raise UnsupportedDegree(f"degree {l} exceeds the cap {L_MAX}")


def sh_spec(l_max: int) -> IrrepsSpec:
    return IrrepsSpec(tuple((l, (-1) ** l, 1) for l in range(l_max + 1)))


def spherical_harmonics(direction, l_max: int, check_unit: bool = True) -> EquivariantFeature:
    """Real harmonics Y_l^m for l = 0..l_max, one mult-1 block per degree."""
    if l_max > L_MAX or l_max < 0:
        raise UnsupportedDegree(f"l_max={l_max} not in [0, {L_MAX}]")
    vec = torch.as_tensor(direction, dtype=DTYPE)
    if vec.shape[-1] != 3:
        raise ShapeError("direction must have a trailing axis of length 3")
    if check_unit:
        norms = torch.linalg.norm(vec.detach(), dim=-1)
        if (torch.abs(norms - 1.0) > 1e-9).any():
            raise NonUnitVector("direction is not a unit vector within 1e-9")
    blocks = {(l, (-1) ** l): sh_components(vec, l).unsqueeze(-2) for l in range(l_max + 1)}
    return EquivariantFeature(sh_spec(l_max), blocks)


# ---------------------------------------------------------------------------
# rotations

def _sample_directions(n: int, seed: int = 1234) -> np.ndarray:
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def wigner_d(l: int, rotation) -> np.ndarray:
    """Matrix D with Y_l(R x) = D Y_l(x) for a proper rotation R."""
    R = np.asarray(rotation, dtype=np.float64)
    pts = _sample_directions(4 * (2 * l + 1))
    A = sh_components(pts, l)  # (n, d)
    B = sh_components(pts @ R.T, l)  # rows are Y(R x_k)
    # B = A D^T  ->  D^T = lstsq(A, B)
    Dt, *_ = np.linalg.lstsq(A, B, rcond=None)
    return Dt.T


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform proper rotation."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate_feature(x: EquivariantFeature, rotation) -> EquivariantFeature:
    """Act with an orthogonal matrix (proper or improper) on every block."""
    R = np.asarray(rotation, dtype=np.float64)
    improper = np.linalg.det(R) < 0
    R_proper = -R if improper else R

    def act(key, block):
        l, p = key
        D = torch.as_tensor(wigner_d(l, R_proper), dtype=DTYPE)
        out = block @ D.T
        return out * p if improper else out

    return x.map_blocks(act)


# ---------------------------------------------------------------------------
# Clebsch-Gordan

def _triangle(l1: int, l2: int, L: int) -> bool:
    return abs(l1 - l2) <= L <= l1 + l2


@functools.lru_cache(maxsize=None)
def _cg_block(l1: int, l2: int, L: int) -> np.ndarray:
    """Real coupling tensor (2l1+1, 2l2+1, 2L+1); see module docstring."""
    if not _triangle(l1, l2, L):
        raise InvalidPath(f"({l1}, {l2}) -> {L} violates the triangle rule")
    if l1 > l2:
        return (-1) ** (l1 + l2 - L) * _cg_block(l2, l1, L).transpose(1, 0, 2)
    d1, d2, d3 = 2 * l1 + 1, 2 * l2 + 1, 2 * L + 1
    rng = np.random.default_rng(20240611 + 100 * l1 + 10 * l2 + L)
    # the invariant vectors of D1 (x) D2 (x) D3 span the null space of K
    K = np.zeros((d1 * d2 * d3,) * 2)
    for _ in range(3):
        R = random_rotation(rng)
        big = np.kron(np.kron(wigner_d(l1, R), wigner_d(l2, R)), wigner_d(L, R))
        M = big - np.eye(big.shape[0])
        K += M.T @ M
    evals, evecs = np.linalg.eigh(K)
    if len(evals) > 1 and evals[1] < 1e-6:
        raise AssertionError("coupling space is not one-dimensional")
    c = evecs[:, 0].reshape(d1, d2, d3)
    c *= math.sqrt(d3) / np.linalg.norm(c)
    flat = c.ravel()
    big_idx = int(np.argmax(np.abs(flat) > np.abs(flat).max() - 1e-9))
    if flat[big_idx] < 0:
        c = -c
    c[np.abs(c) < 1e-13] = 0.0
    return c


@functools.lru_cache(maxsize=None)
def _cg_torch(l1: int, l2: int, L: int) -> torch.Tensor:
    return torch.as_tensor(_cg_block(l1, l2, L), dtype=DTYPE)


@dataclass(frozen=True)
class CGTable:
    """Coupling tensors for every triangle-allowed (l1, l2, L) up to l_max.

    In the real basis a coefficient can be non-zero only when
    ``|M| in {|m1 + m2|, |m1 - m2|}``; this is the real-basis analogue of
    the complex rule ``M = m1 + m2``.
    """

    l_max: int
    blocks: dict

    def coeff(self, l1, l2, L, m1, m2, M) -> float:
        block = self.blocks.get((l1, l2, L))
        if block is None:
            return 0.0
        return float(block[m1 + l1, m2 + l2, M + L])

    def __getitem__(self, key) -> np.ndarray:
        return self.blocks[tuple(key)]

    def paths(self):
        return sorted(self.blocks)


def build_cg_table(l_max: int) -> CGTable:
    if l_max > L_MAX or l_max < 0:
        raise UnsupportedDegree(f"l_max={l_max} not in [0, {L_MAX}]")
    blocks = {}
    for l1 in range(l_max + 1):
        for l2 in range(l_max + 1):
            for L in range(abs(l1 - l2), min(l1 + l2, l_max) + 1):
                blocks[(l1, l2, L)] = _cg_block(l1, l2, L)
    return CGTable(l_max, blocks)


# ---------------------------------------------------------------------------
# tensor products

class Path(NamedTuple):
    l1: int
    p1: int
    l2: int
    p2: int
    L: int
    P: int


def tp_paths(a_spec: IrrepsSpec, b_spec: IrrepsSpec, out_keys: Iterable, l_max: int = L_MAX) -> list:
    """All (a-block, b-block) -> output-block couplings allowed by the
    triangle rule and the parity product, in deterministic order."""
    out_keys = set(tuple(k) for k in out_keys)
    paths = []
    for l1, p1 in a_spec.keys:
        for l2, p2 in b_spec.keys:
            for L in range(abs(l1 - l2), min(l1 + l2, l_max) + 1):
                if (L, p1 * p2) in out_keys:
                    paths.append(Path(l1, p1, l2, p2, L, p1 * p2))
    return paths


def uvu_output_spec(a_spec: IrrepsSpec, b_spec: IrrepsSpec, out_keys: Iterable, l_max: int = L_MAX) -> IrrepsSpec:
    """Output spec of a channel-wise product: paths are concatenated."""
    mults: dict = {}
    for path in tp_paths(a_spec, b_spec, out_keys, l_max):
        u = max(a_spec.mult((path.l1, path.p1)), b_spec.mult((path.l2, path.p2)))
        mults[(path.L, path.P)] = mults.get((path.L, path.P), 0) + u
    return IrrepsSpec.from_dict(mults)


def tensor_product(
    a: EquivariantFeature,
    b: EquivariantFeature,
    out_spec: IrrepsSpec,
    weights=None,
    mode: str = "uvu",
) -> EquivariantFeature:
    """Weighted Clebsch-Gordan contraction of two features.

    ``mode="uvu"`` is channel-wise: the two input blocks of a path must have
    equal multiplicity or multiplicity 1, each path yields ``u`` channels and
    paths feeding one output block are concatenated in path order, so
    ``out_spec`` must carry exactly that many channels.  ``weights`` is a
    sequence aligned with :func:`tp_paths`, each entry broadcastable to
    (*batch, u); ``None`` means unit weights.

    ``mode="uvw"`` is fully connected: entry ``k`` has shape (u, v, w) with w
    the output multiplicity, and paths into one block are summed.
    """
    out_keys = out_spec.keys
    paths = tp_paths(a.spec, b.spec, out_keys)
    reached = {(p.L, p.P) for p in paths}
    missing = [k for k in out_keys if k not in reached]
    if missing:
        raise InvalidPath(f"no coupling path produces output blocks {missing}")
    if weights is not None and not isinstance(weights, (int, float)) and len(weights) != len(paths):
        raise ShapeError(f"expected {len(paths)} path weights, got {len(weights)}")
    batch = torch.broadcast_shapes(a.batch_shape, b.batch_shape)
    pieces: dict = {k: [] for k in out_keys}
    for k, path in enumerate(paths):
        xa = a[(path.l1, path.p1)]
        xb = b[(path.l2, path.p2)]
        cg = _cg_torch(path.l1, path.l2, path.L)
        w = weights if weights is None or isinstance(weights, (int, float)) else weights[k]
        if mode == "uvu":
            ua, ub = xa.shape[-2], xb.shape[-2]
            if ua != ub and 1 not in (ua, ub):
                raise ShapeError(f"channel-wise path {path} needs equal multiplicities, got {ua} and {ub}")
            out = torch.einsum("...ui,...uj,ijk->...uk", xa, xb, cg)
            if w is not None:
                w = torch.as_tensor(w, dtype=DTYPE)
                out = out * (w.unsqueeze(-1) if w.dim() > 0 else w)
        elif mode == "uvw":
            if w is None:
                raise ShapeError("fully connected products need explicit weights")
            out = torch.einsum("...ui,...vj,ijk,uvw->...wk", xa, xb, cg, torch.as_tensor(w, dtype=DTYPE))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        pieces[(path.L, path.P)].append(out.expand(*batch, *out.shape[-2:]))
    blocks = {}
    for key, parts in pieces.items():
        block = torch.cat(parts, dim=-2) if mode == "uvu" else sum(parts)
        if block.shape[-2] != out_spec.mult(key):
            raise ShapeError(f"output block {key} has {block.shape[-2]} channels, spec says {out_spec.mult(key)}")
        blocks[key] = block
    return EquivariantFeature(out_spec, blocks)


# ---------------------------------------------------------------------------
# linear maps and gates

def equivariant_linear(x: EquivariantFeature, W: Mapping, out_spec: IrrepsSpec | None = None) -> EquivariantFeature:
    """Mix multiplicities inside each (l, parity) block.

    ``W[(l, p)]`` has shape (*batch?, mult_out, mult_in).  Output blocks
    listed in ``out_spec`` but absent from ``W`` or ``x`` are zero.
    """
    if out_spec is None:
        out_spec = IrrepsSpec(tuple((l, p, torch.as_tensor(w).shape[-2]) for (l, p), w in W.items()))
    batch = x.batch_shape
    blocks = {}
    for l, p, m_out in out_spec.entries:
        w = W.get((l, p))
        if w is None or (l, p) not in x.spec:
            blocks[(l, p)] = torch.zeros(*batch, m_out, 2 * l + 1, dtype=DTYPE)
            continue
        w = torch.as_tensor(w, dtype=DTYPE)
        if w.shape[-1] != x.spec.mult((l, p)) or w.shape[-2] != m_out:
            raise ShapeError(f"weight for {(l, p)} has shape {tuple(w.shape)}, expected (..., {m_out}, {x.spec.mult((l, p))})")
        blocks[(l, p)] = torch.matmul(w, x[(l, p)])
    return EquivariantFeature(out_spec, blocks)


def silu(t: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.silu(t)


def gate_count(spec: IrrepsSpec) -> int:
    return sum(m for l, _, m in spec.entries if l > 0)


def gate(x: EquivariantFeature, gate_scalars=None) -> EquivariantFeature:
    """SiLU gate: even scalars -> SiLU, odd scalars -> tanh (odd function, so
    reflections are respected), every non-scalar channel scaled by SiLU of
    its own gate scalar.  Gate scalars are consumed in block order."""
    need = gate_count(x.spec)
    if need:
        if gate_scalars is None:
            raise ShapeError(f"{need} gate scalars required")
        gate_scalars = torch.as_tensor(gate_scalars, dtype=DTYPE)
        if gate_scalars.shape[-1] != need:
            raise ShapeError(f"expected {need} gate scalars, got {gate_scalars.shape[-1]}")
    elif gate_scalars is not None and torch.as_tensor(gate_scalars).shape[-1] != 0:
        raise ShapeError("feature has no non-scalar channels to gate")
    blocks = {}
    offset = 0
    for l, p, m in x.spec.entries:
        block = x[(l, p)]
        if l == 0:
            blocks[(l, p)] = silu(block) if p == 1 else torch.tanh(block)
        else:
            g = silu(gate_scalars[..., offset : offset + m])
            offset += m
            blocks[(l, p)] = block * g.unsqueeze(-1)
    return EquivariantFeature(x.spec, blocks)
