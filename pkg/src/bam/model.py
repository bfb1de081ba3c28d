"""Equivariant message-passing energy model with mean-variance heads.

Energy is a sum of per-atom, per-layer readouts; each interaction layer
updates the node features in residual form and reads out the invariant
part of ``B = A (x) a1`` where ``a1`` is the one-body feature.  Forces are
``-dE/dr`` through the autograd graph; the heads never feed back into the
force mean.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import diff_engine
from .errors import ShapeError, UnknownSpecies
from .geometry import AtomicStructure, NeighborList, bessel_basis, build_neighbor_list
from .tensor_core import (
    EquivariantFeature,
    IrrepsSpec,
    equivariant_linear,
    gate,
    sh_components,
    sh_spec,
    silu,
    tensor_product,
    tp_paths,
    uvu_output_spec,
)

DTYPE = torch.float64
HEAD_MODES = ("Base", "MVE2", "MVE8")


@dataclass(frozen=True)
class ModelConfig:
    r_cut: float = 5.0
    n_basis: int = 8
    n_layers: int = 2
    hidden_irreps: str = "8x0e+8x1o+8x2e"
    feature_dim: int = 16
    l_max: int = 2
    species_list: tuple = (1,)
    head_mode: str = "MVE8"
    variance_activation: str = "softplus"
    variance_floor: float = 1e-6
    cov_jitter: float = 1e-6
    max_neighbors: Optional[int] = None
    avg_neighbors: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "species_list", tuple(int(z) for z in self.species_list))
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 0 <= self.l_max <= 3:
            raise ValueError("l_max must be in [0, 3]")
        if self.variance_floor <= 0 or self.cov_jitter <= 0:
            raise ValueError("variance_floor and cov_jitter must be positive")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.variance_activation not in ("softplus", "exp"):
            raise ValueError("variance_activation must be softplus or exp")
        if len(set(self.species_list)) != len(self.species_list) or not self.species_list:
            raise ValueError("species_list must be non-empty and unique")
        IrrepsSpec.parse(self.hidden_irreps)

    @property
    def hidden(self) -> IrrepsSpec:
        return IrrepsSpec.parse(self.hidden_irreps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["species_list"] = list(self.species_list)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "species_list" in d:
            d["species_list"] = tuple(d["species_list"])
        return cls(**d)


def _key_name(key) -> str:
    l, p = key
    return f"{l}{'e' if p == 1 else 'o'}"


def _out_spec(cfg: ModelConfig, t: int) -> IrrepsSpec:
    # the last layer only needs the blocks its readout and heads consume
    hidden = cfg.hidden
    if t < cfg.n_layers - 1:
        return hidden
    keep = _b_keys(cfg, t)
    return IrrepsSpec(tuple(e for e in hidden.entries if (e[0], e[1]) in keep))


def _layer_specs(cfg: ModelConfig, t: int):
    """(input spec, output spec, conv output spec, tensor-product paths) of layer t."""
    in_spec = IrrepsSpec(((0, 1, cfg.feature_dim),)) if t == 0 else cfg.hidden
    out_spec = _out_spec(cfg, t)
    ysh = sh_spec(cfg.l_max)
    paths = tp_paths(ysh, in_spec, out_spec.keys, cfg.l_max)
    conv_spec = uvu_output_spec(ysh, in_spec, out_spec.keys, cfg.l_max)
    return in_spec, out_spec, conv_spec, paths


def _b_keys(cfg: ModelConfig, t: int) -> list:
    hidden = cfg.hidden
    keys = [(0, 1)] if (0, 1) in hidden else []
    if t == cfg.n_layers - 1 and cfg.head_mode == "MVE8" and (2, 1) in hidden:
        keys.append((2, 1))
    return keys


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Every parameter name and shape, derived from the config alone."""
    hidden = cfg.hidden
    if (0, 1) not in hidden:
        raise ShapeError("hidden irreps need an even scalar block for the readout")
    F, S, R = cfg.feature_dim, len(cfg.species_list), cfg.feature_dim
    shapes: OrderedDict = OrderedDict()
    shapes["species_energy"] = (S,)
    shapes["embedding"] = (S, F)
    shapes["a1"] = (F, F)
    for t in range(cfg.n_layers):
        in_spec, out_spec, conv_spec, paths = _layer_specs(cfg, t)
        pre = f"layer{t}."
        for l, p, m in in_spec.entries:
            shapes[pre + f"lin_in.{_key_name((l, p))}"] = (m, m)
        n_weights = sum(in_spec.mult((pa.l2, pa.p2)) for pa in paths)
        shapes[pre + "radial.w0"] = (cfg.n_basis, F)
        shapes[pre + "radial.w1"] = (F, F)
        shapes[pre + "radial.w2"] = (F, n_weights)
        for l, p, m in out_spec.entries:
            if (l, p) in conv_spec:
                shapes[pre + f"lin_out.{_key_name((l, p))}"] = (m, conv_spec.mult((l, p)))
        for l, p, m in out_spec.entries:
            if (l, p) in in_spec:
                shapes[pre + f"si.{_key_name((l, p))}"] = (S, m, in_spec.mult((l, p)))
        for key in _b_keys(cfg, t):
            m = hidden.mult(key)
            shapes[pre + f"b.{_key_name(key)}"] = (m, F, m)
        shapes[pre + "readout.lin"] = (R, hidden.mult((0, 1)))
        shapes[pre + "readout.w"] = (R,)
    if cfg.head_mode in ("MVE2", "MVE8"):
        shapes["head.var.w"] = (R,)
        shapes["head.var.b"] = (1,)
    if cfg.head_mode == "MVE8":
        shapes["head.cov.s.w"] = (R,)
        shapes["head.cov.s.b"] = (1,)
        if (2, 1) in hidden:
            shapes["head.cov.q"] = (1, hidden.mult((2, 1)))
    return shapes


def is_last_layer_param(name: str) -> bool:
    """Parameters on which the energy depends linearly (last-layer Laplace)."""
    return name == "species_energy" or name.endswith(".readout.w")


@dataclass
class ModelParams:
    arrays: "OrderedDict[str, torch.Tensor]"

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def flatten(self) -> torch.Tensor:
        return torch.cat([a.reshape(-1) for a in self.arrays.values()])

    def numpy_flat(self) -> np.ndarray:
        return self.flatten().detach().numpy().copy()

    @classmethod
    def from_flat(cls, cfg: ModelConfig, flat, requires_grad: bool = False) -> "ModelParams":
        flat = torch.as_tensor(flat, dtype=DTYPE)
        shapes = param_shapes(cfg)
        total = sum(int(np.prod(s)) for s in shapes.values())
        if flat.numel() != total:
            raise ShapeError(f"flat vector has {flat.numel()} entries, config needs {total}")
        if requires_grad:
            flat = flat.detach().clone().requires_grad_(True)
        arrays = OrderedDict()
        offset = 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            arrays[name] = flat[offset : offset + n].reshape(shape)
            offset += n
        params = cls(arrays)
        params.leaf = flat if requires_grad else None
        return params

    def detached(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, v.detach().clone()) for k, v in self.arrays.items()))

    def trainable(self) -> "ModelParams":
        """Independent leaf tensors, one per parameter."""
        return ModelParams(OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in self.arrays.items()))

    def slice_of(self, cfg: ModelConfig, predicate) -> np.ndarray:
        """Boolean mask over the flat vector selecting parameters by name."""
        mask = []
        for name, shape in param_shapes(cfg).items():
            mask.append(np.full(int(np.prod(shape)), bool(predicate(name))))
        return np.concatenate(mask)


def n_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Zero-mean normal weights with variance 1/fan_in.  Readout and head
    weights start at zero, so the initial energy is the species shift and
    the variance heads start from their biases."""
    arrays = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name == "species_energy" or name.endswith("readout.w") or name.startswith("head."):
            value = np.zeros(shape)
        elif name == "embedding":
            value = rng.normal(size=shape)
        else:
            if ".b." in name:  # (u, v, w) product weights
                fan_in = shape[0] * shape[1]
            elif ".si." in name or ".lin_" in name or ".readout.lin" in name:  # (out, in)
                fan_in = shape[-1]
            else:  # (in, out)
                fan_in = shape[0]
            value = rng.normal(scale=1.0 / math.sqrt(fan_in), size=shape)
        arrays[name] = torch.as_tensor(value, dtype=DTYPE)
    # unit per-atom energy sd and unit force covariance at the start
    if "head.var.b" in arrays:
        unit = math.log(math.expm1(1.0)) if cfg.variance_activation == "softplus" else 0.0
        arrays["head.var.b"] = torch.full((1,), unit, dtype=DTYPE)
    if "head.cov.s.b" in arrays:
        arrays["head.cov.s.b"] = torch.full((1,), unit, dtype=DTYPE)
    return ModelParams(arrays)


# ---------------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    positions: torch.Tensor  # (N, 3)
    cells: torch.Tensor  # (B, 3, 3)
    species_index: torch.Tensor  # (N,)
    atom_struct: torch.Tensor  # (N,)
    centers: torch.Tensor  # (E,)
    neighbors: torch.Tensor  # (E,)
    shifts: torch.Tensor  # (E, 3) float
    edge_struct: torch.Tensor  # (E,)
    n_structs: int
    periodic: np.ndarray  # (B,) bool

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]


def species_index(cfg: ModelConfig, species) -> np.ndarray:
    lookup = {z: k for k, z in enumerate(cfg.species_list)}
    try:
        return np.array([lookup[int(z)] for z in species], dtype=np.int64)
    except KeyError as exc:
        raise UnknownSpecies(f"species {exc.args[0]} not in {cfg.species_list}") from None


def neighbor_lists(structures: Sequence[AtomicStructure], cfg: ModelConfig) -> list:
    return [build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors) for s in structures]


def collate(structures: Sequence[AtomicStructure], cfg: ModelConfig, nls: Optional[Sequence[NeighborList]] = None) -> GraphBatch:
    if nls is None:
        nls = neighbor_lists(structures, cfg)
    pos, cells, spec, astruct = [], [], [], []
    cen, nei, shf, estruct = [], [], [], []
    offset = 0
    for b, (s, nl) in enumerate(zip(structures, nls)):
        n = len(s)
        pos.append(s.positions)
        cells.append(s.cell if s.cell is not None else np.zeros((3, 3)))
        spec.append(species_index(cfg, s.species))
        astruct.append(np.full(n, b))
        cen.append(nl.centers + offset)
        nei.append(nl.neighbors + offset)
        shf.append(nl.shifts if s.is_periodic else np.zeros_like(nl.shifts))
        estruct.append(np.full(len(nl), b))
        offset += n
    as_long = lambda parts: torch.as_tensor(np.concatenate(parts), dtype=torch.int64)
    return GraphBatch(
        positions=torch.as_tensor(np.concatenate(pos), dtype=DTYPE),
        cells=torch.as_tensor(np.stack(cells), dtype=DTYPE),
        species_index=as_long(spec),
        atom_struct=as_long(astruct),
        centers=as_long(cen),
        neighbors=as_long(nei),
        shifts=torch.as_tensor(np.concatenate(shf).reshape(-1, 3), dtype=DTYPE),
        edge_struct=as_long(estruct),
        n_structs=len(structures),
        periodic=np.array([s.is_periodic for s in structures]),
    )


# ---------------------------------------------------------------------------
# heads

def _positive(raw: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "softplus":
        return torch.nn.functional.softplus(raw)
    return torch.exp(raw)


def energy_variance(raw, atom_struct=None, n_structs: int = 1, floor: float = 1e-6, activation: str = "softplus"):
    """Structure energy variance: sum over atoms of softplus(raw_i)**2 + floor."""
    raw = torch.as_tensor(raw, dtype=DTYPE)
    per_atom = _positive(raw, activation) ** 2 + floor
    if atom_struct is None:
        return per_atom.sum()
    out = torch.zeros(n_structs, dtype=DTYPE)
    return out.index_add(0, atom_struct, per_atom)


def assemble_force_cov(channels, eps: float, activation: str = "softplus") -> torch.Tensor:
    """Sigma = L L^T + eps I from six channels per atom.

    Layout of L (rows): (c1, 0, 0), (c6, c2, 0), (c5, c4, c3); the diagonal
    channels c1..c3 pass through the positivity activation.
    """
    c = torch.as_tensor(channels, dtype=DTYPE)
    if c.shape[-1] != 6:
        raise ShapeError("force covariance needs six channels")
    d = _positive(c[..., :3], activation)
    zero = torch.zeros_like(c[..., 0])
    L = torch.stack(
        [
            torch.stack([d[..., 0], zero, zero], -1),
            torch.stack([c[..., 5], d[..., 1], zero], -1),
            torch.stack([c[..., 4], c[..., 3], d[..., 2]], -1),
        ],
        -2,
    )
    eye = torch.eye(3, dtype=DTYPE)
    return L @ L.transpose(-1, -2) + eps * eye


# symmetric matrices B_m with x^T B_m x proportional to Y_2^m(x), shared factor
_S = 1.0 / math.sqrt(2.0)
_QUAD_BASIS = torch.tensor(
    [
        [[0, _S, 0], [_S, 0, 0], [0, 0, 0]],
        [[0, 0, 0], [0, 0, _S], [0, _S, 0]],
        [[-1 / math.sqrt(6), 0, 0], [0, -1 / math.sqrt(6), 0], [0, 0, 2 / math.sqrt(6)]],
        [[0, 0, _S], [0, 0, 0], [_S, 0, 0]],
        [[_S, 0, 0], [0, -_S, 0], [0, 0, 0]],
    ],
    dtype=DTYPE,
)


def equivariant_force_cov(s, q, eps: float) -> torch.Tensor:
    """Sigma = T T^T + eps I with symmetric T = s I + sum_m q_m B_m.

    ``s`` is an even scalar and ``q`` an l=2 even vector per atom, so T and
    therefore Sigma rotate as R Sigma R^T.  Any positive-definite matrix is
    reachable (T its symmetric square root).
    """
    T = s[..., None, None] * torch.eye(3, dtype=DTYPE)
    if q is not None:
        T = T + torch.einsum("...m,mab->...ab", q, _QUAD_BASIS)
    return T @ T.transpose(-1, -2) + eps * torch.eye(3, dtype=DTYPE)


# ---------------------------------------------------------------------------
# forward pass


def _radial_mlp(params: ModelParams, pre: str, rbf: torch.Tensor) -> torch.Tensor:
    # bias-free so the filter vanishes with the basis at the cutoff
    h = silu(rbf @ params[pre + "radial.w0"])
    h = silu(h @ params[pre + "radial.w1"])
    return h @ params[pre + "radial.w2"]


def run(
    batch: GraphBatch,
    cfg: ModelConfig,
    params: ModelParams,
    forces: bool = True,
    create_graph: bool = False,
    stress: bool = False,
) -> dict:
    """Batched evaluation returning a dict of tensors.

    Keys: energy (B,), atom_energy (N,), layer_energy (N, 1 + n_layers)
    with column 0 the species shift, energy_var (B,) [MVE], force_cov
    (N, 3, 3) [MVE8], forces (N, 3), stress (B, 3, 3) [periodic only].
    """
    hidden = cfg.hidden
    positions = batch.positions
    cells = batch.cells
    need_pos_grad = forces or stress
    if need_pos_grad and not positions.requires_grad:
        positions = positions.detach().clone().requires_grad_(True)
    if stress and not cells.requires_grad:
        cells = cells.detach().clone().requires_grad_(True)

    vec = positions[batch.neighbors] - positions[batch.centers]
    if batch.shifts.shape[0]:
        vec = vec + torch.einsum("ex,exy->ey", batch.shifts, cells[batch.edge_struct])
    length = torch.linalg.norm(vec, dim=-1)
    unit = vec / length.unsqueeze(-1)
    rbf = bessel_basis(length, cfg.n_basis, cfg.r_cut) if len(length) else torch.zeros(0, cfg.n_basis, dtype=DTYPE)
    ysh = EquivariantFeature(
        sh_spec(cfg.l_max), {(l, (-1) ** l): sh_components(unit, l).unsqueeze(-2) for l in range(cfg.l_max + 1)}
    )

    spc = batch.species_index
    n_atoms = batch.n_atoms
    emb = params["embedding"][spc]
    A = EquivariantFeature(IrrepsSpec(((0, 1, cfg.feature_dim),)), {(0, 1): emb.unsqueeze(-1)})
    a1 = EquivariantFeature(A.spec, {(0, 1): (emb @ params["a1"].T).unsqueeze(-1)})

    layer_e = [params["species_energy"][spc]]
    readout_h = None
    B = None
    for t in range(cfg.n_layers):
        pre = f"layer{t}."
        in_spec, out_spec, conv_spec, paths = _layer_specs(cfg, t)
        lin_in = {key: params[pre + f"lin_in.{_key_name(key)}"] for key in in_spec.keys}
        x = equivariant_linear(A, lin_in, in_spec)
        # convolution: sum_j (Y(r_ij) (x) A_j) * M(rbf_ij)
        radial = _radial_mlp(params, pre, rbf)
        weights, offset = [], 0
        for pa in paths:
            u = in_spec.mult((pa.l2, pa.p2))
            weights.append(radial[:, offset : offset + u])
            offset += u
        xj = EquivariantFeature(in_spec, {k: v[batch.neighbors] for k, v in x.blocks.items()})
        msg = tensor_product(ysh, xj, conv_spec, weights)
        pooled = {}
        for key, block in msg.blocks.items():
            agg = torch.zeros(n_atoms, *block.shape[1:], dtype=DTYPE).index_add(0, batch.centers, block)
            pooled[key] = agg / cfg.avg_neighbors
        conv = EquivariantFeature(conv_spec, pooled)
        lin_out = {key: params[pre + f"lin_out.{_key_name(key)}"] for key in out_spec.keys if key in conv_spec}
        f = equivariant_linear(conv, lin_out, out_spec)
        si = {key: params[pre + f"si.{_key_name(key)}"][spc] for key in out_spec.keys if key in in_spec}
        f_si = equivariant_linear(A, si, out_spec)
        A = EquivariantFeature(out_spec, {k: f_si[k] + f[k] for k in out_spec.keys})
        # readout of the invariant part of B = A (x) a1
        b_keys = _b_keys(cfg, t)
        b_spec = IrrepsSpec(tuple((l, p, hidden.mult((l, p))) for l, p in b_keys))
        a_sub = EquivariantFeature(
            IrrepsSpec(tuple((l, p, hidden.mult((l, p))) for l, p in b_keys)), {k: A[k] for k in b_keys}
        )
        B = tensor_product(a_sub, a1, b_spec, [params[pre + f"b.{_key_name(k)}"] for k in b_keys], mode="uvw")
        scal = EquivariantFeature(
            IrrepsSpec(((0, 1, cfg.feature_dim),)),
            {(0, 1): (B.scalars() @ params[pre + "readout.lin"].T).unsqueeze(-1)},
        )
        readout_h = gate(scal).scalars()
        layer_e.append(readout_h @ params[pre + "readout.w"])

    layer_energy = torch.stack(layer_e, dim=-1)
    atom_energy = layer_energy.sum(-1)
    energy = torch.zeros(batch.n_structs, dtype=DTYPE).index_add(0, batch.atom_struct, atom_energy)
    out = {"energy": energy, "atom_energy": atom_energy, "layer_energy": layer_energy}

    if cfg.head_mode in ("MVE2", "MVE8"):
        raw = readout_h @ params["head.var.w"] + params["head.var.b"][0]
        out["atom_var_raw"] = raw
        out["energy_var"] = energy_variance(
            raw, batch.atom_struct, batch.n_structs, cfg.variance_floor, cfg.variance_activation
        )
    if cfg.head_mode == "MVE8":
        # the symmetric square root of a positive-definite matrix has positive trace, so s > 0 loses nothing
        s_inv = _positive(readout_h @ params["head.cov.s.w"] + params["head.cov.s.b"][0], cfg.variance_activation)
        q = None
        if "head.cov.q" in params.arrays:
            q = torch.einsum("om,nmk->nk", params["head.cov.q"], B[(2, 1)])
        out["force_cov"] = equivariant_force_cov(s_inv, q, cfg.cov_jitter)

    if need_pos_grad:
        wrt = [positions] + ([cells] if stress else [])
        grads = diff_engine.grad(energy.sum(), wrt, create_graph=create_graph, retain_graph=True if create_graph else None)
        if forces:
            out["forces"] = -grads[0]
        if stress:
            dpos, dcell = grads
            st = torch.zeros(batch.n_structs, 3, 3, dtype=DTYPE)
            st = st.index_add(0, batch.atom_struct, positions.unsqueeze(-1) * dpos.unsqueeze(-2))
            st = st + cells.transpose(-1, -2) @ dcell
            volume = torch.abs(torch.linalg.det(cells))
            periodic = torch.as_tensor(batch.periodic)
            safe = torch.where(periodic, volume, torch.ones_like(volume))
            out["stress"] = torch.where(periodic[:, None, None], st / safe[:, None, None], torch.zeros_like(st))
    return out


@dataclass
class PredictiveDistribution:
    energy_mean: float
    force_mean: np.ndarray
    energy_var: Optional[float] = None
    force_cov: Optional[np.ndarray] = None
    energy_aleatoric: Optional[float] = None
    energy_epistemic: Optional[float] = None
    atom_energy: Optional[np.ndarray] = None
    stress: Optional[np.ndarray] = None

    @property
    def force_var(self) -> Optional[np.ndarray]:
        if self.force_cov is None:
            return None
        return np.diagonal(self.force_cov, axis1=-2, axis2=-1).copy()


def _split(out: dict, batch: GraphBatch) -> list:
    atom_struct = batch.atom_struct.numpy()
    res = []
    for b in range(batch.n_structs):
        sel = atom_struct == b
        get = lambda k: out[k].detach().numpy()
        res.append(
            PredictiveDistribution(
                energy_mean=float(get("energy")[b]),
                force_mean=get("forces")[sel],
                energy_var=float(get("energy_var")[b]) if "energy_var" in out else None,
                force_cov=get("force_cov")[sel] if "force_cov" in out else None,
                atom_energy=get("atom_energy")[sel],
                stress=get("stress")[b] if "stress" in out and batch.periodic[b] else None,
            )
        )
    return res


def predict(structures: Sequence[AtomicStructure], cfg: ModelConfig, params: ModelParams, stress: bool = False, nls=None) -> list:
    batch = collate(structures, cfg, nls)
    out = run(batch, cfg, params, forces=True, stress=stress)
    return _split(out, batch)


def forward(s: AtomicStructure, cfg: ModelConfig, params: ModelParams, stress: bool = False) -> PredictiveDistribution:
    """Predictive distribution of one structure."""
    return predict([s], cfg, params, stress=stress and s.is_periodic)[0]


def energy_fn(s: AtomicStructure, cfg: ModelConfig, params: ModelParams):
    """Energy as a function of (positions, cell) tensors for diff_engine.stress."""
    nl = build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors)

    def fn(positions, cell):
        batch = collate([s], cfg, [nl])
        batch.positions = positions
        batch.cells = cell.unsqueeze(0)
        return run(batch, cfg, params, forces=False)["energy"].sum()

    return fn
