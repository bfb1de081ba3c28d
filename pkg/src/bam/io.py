"""Extended XYZ datasets, deterministic splits, checkpoints, run configs
and seeded random substreams."""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, CorruptCheckpoint, IncompatibleCheckpoint, ParseError, SplitError
from .geometry import AtomicStructure

# fmt: off
SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr "
    "Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb "
    "Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf "
    "Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
# fmt: on
NUMBERS = {s: z for z, s in enumerate(SYMBOLS)}


def _number(token: str) -> int:
    if token in NUMBERS:
        return NUMBERS[token]
    if token.isdigit():
        return int(token)
    raise KeyError(token)


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


# ---------------------------------------------------------------------------
# extended XYZ


@dataclass
class Dataset:
    structures: list
    source: str = ""
    content_hash: str = ""
    partial_labels: bool = False

    def __post_init__(self):
        if not self.structures:
            raise ParseError("dataset is empty")
        has_e = [s.energy is not None for s in self.structures]
        has_f = [s.forces is not None for s in self.structures]
        mixed = (any(has_e) and not all(has_e)) or (any(has_f) and not all(has_f))
        self.partial_labels = self.partial_labels or mixed

    def __len__(self):
        return len(self.structures)

    def __iter__(self):
        return iter(self.structures)

    def __getitem__(self, k):
        return self.structures[k]

    @property
    def labeled(self) -> bool:
        return all(s.energy is not None and s.forces is not None for s in self.structures)


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_comment(line: str, lineno: int) -> dict:
    try:
        tokens = shlex.split(line, posix=True)
    except ValueError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None
    out = {}
    for tok in tokens:
        if "=" not in tok:
            out[tok] = True
            continue
        key, value = tok.split("=", 1)
        out[key] = value
    return out


def _parse_properties(spec: str, lineno: int) -> list:
    parts = spec.split(":")
    if len(parts) % 3:
        raise ParseError(f"line {lineno}: malformed Properties {spec!r}")
    cols = []
    for k in range(0, len(parts), 3):
        name, kind, n = parts[k], parts[k + 1], parts[k + 2]
        if kind not in ("S", "R", "I", "L") or not n.isdigit():
            raise ParseError(f"line {lineno}: malformed Properties entry {name!r}")
        cols.append((name, kind, int(n)))
    return cols


def parse_extxyz(text: str, energy_key: str = "energy", forces_key: str = "forces", source: str = "") -> list:
    lines = text.splitlines()
    structures = []
    pos = 0
    frame = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        head_line = pos + 1
        try:
            n_atoms = int(lines[pos].strip())
        except ValueError:
            raise ParseError(f"frame {frame}, line {head_line}: expected an atom count, got {lines[pos]!r}") from None
        if n_atoms < 1:
            raise ParseError(f"frame {frame}, line {head_line}: atom count must be positive")
        if pos + 1 >= len(lines):
            raise ParseError(f"frame {frame}, line {head_line + 1}: missing comment line")
        info = _parse_comment(lines[pos + 1], head_line + 1)
        props = _parse_properties(info.pop("Properties", "species:S:1:pos:R:3"), head_line + 1)
        width = sum(n for _, _, n in props)
        body = lines[pos + 2 : pos + 2 + n_atoms]
        if len(body) < n_atoms:
            raise ParseError(f"frame {frame}, line {head_line}: declares {n_atoms} atoms, found {len(body)}")
        columns = {name: [] for name, _, _ in props}
        for k, row in enumerate(body):
            tokens = row.split()
            if len(tokens) != width:
                raise ParseError(
                    f"frame {frame}, line {pos + 3 + k}: expected {width} columns, got {len(tokens)}"
                )
            offset = 0
            for name, kind, n in props:
                columns[name].append(tokens[offset : offset + n])
                offset += n
        try:
            species = [_number(t[0]) for t in columns["species"]]
            positions = np.array(columns["pos"], dtype=np.float64)
            forces = np.array(columns[forces_key], dtype=np.float64) if forces_key in columns else None
        except KeyError as exc:
            raise ParseError(f"frame {frame}, line {head_line}: missing or unknown column/species {exc}") from None
        except ValueError as exc:
            raise ParseError(f"frame {frame}, line {head_line}: {exc}") from None
        cell = None
        if "Lattice" in info:
            try:
                cell = np.array(info.pop("Lattice").split(), dtype=np.float64).reshape(3, 3)
            except ValueError:
                raise ParseError(f"frame {frame}, line {head_line + 1}: Lattice needs 9 floats") from None
        pbc = (cell is not None,) * 3
        if "pbc" in info:
            flags = str(info.pop("pbc")).split()
            if len(flags) != 3 or any(f not in ("T", "F", "True", "False") for f in flags):
                raise ParseError(f"frame {frame}, line {head_line + 1}: pbc needs three T/F flags")
            pbc = tuple(f in ("T", "True") for f in flags)
        energy = None
        if energy_key in info:
            try:
                energy = float(info.pop(energy_key))
            except ValueError:
                raise ParseError(f"frame {frame}, line {head_line + 1}: energy is not a number") from None
        extra = {k: _parse_value(v) if isinstance(v, str) else v for k, v in info.items()}
        try:
            structures.append(AtomicStructure(positions, species, cell, pbc, energy, forces, extra))
        except ValueError as exc:
            raise ParseError(f"frame {frame}, line {head_line}: {exc}") from None
        pos += 2 + n_atoms
        frame += 1
    return structures


def read_extxyz(path, energy_key: str = "energy", forces_key: str = "forces") -> Dataset:
    raw = Path(path).read_bytes()
    structures = parse_extxyz(raw.decode("utf-8"), energy_key, forces_key, str(path))
    if not structures:
        raise ParseError(f"{path}: no frames")
    return Dataset(structures, str(path), hashlib.sha256(raw).hexdigest())


def _info_value(v) -> str:
    if isinstance(v, bool):
        return "T" if v else "F"
    if isinstance(v, float):
        return _fmt(v)
    text = str(v)
    return f'"{text}"' if any(c.isspace() for c in text) or not text else text


def format_extxyz(structures: Sequence[AtomicStructure], energy_key: str = "energy", forces_key: str = "forces") -> str:
    out = []
    for s in structures:
        props = "species:S:1:pos:R:3" + (f":{forces_key}:R:3" if s.forces is not None else "")
        head = []
        if s.cell is not None:
            head.append('Lattice="' + " ".join(_fmt(x) for x in s.cell.reshape(-1)) + '"')
        head.append(f"Properties={props}")
        if s.energy is not None:
            head.append(f"{energy_key}={_fmt(s.energy)}")
        head.append('pbc="' + " ".join("T" if b else "F" for b in s.pbc) + '"')
        for k in sorted(s.info):
            head.append(f"{k}={_info_value(s.info[k])}")
        out.append(str(len(s)))
        out.append(" ".join(head))
        for i in range(len(s)):
            z = int(s.species[i])
            row = [SYMBOLS[z] if 0 < z < len(SYMBOLS) else str(z)] + [_fmt(x) for x in s.positions[i]]
            if s.forces is not None:
                row += [_fmt(x) for x in s.forces[i]]
            out.append(" ".join(row))
    return "\n".join(out) + "\n"


def write_extxyz(path, structures: Sequence[AtomicStructure], **kw) -> None:
    Path(path).write_text(format_extxyz(list(structures), **kw), encoding="utf-8")


# ---------------------------------------------------------------------------
# splits and random streams

STREAMS = ("split", "init", "ivon", "swag", "selection")


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Independent generator for a named purpose (and member index)."""
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS.index(name), int(index))))


def split(structures: Sequence, parts: Sequence, seed: int = 0):
    """Shuffle with the seed, then cut contiguous (train, val, test) slices.

    ``parts`` are either integer counts or fractions of the dataset size.
    """
    structures = list(structures)
    n = len(structures)
    if len(parts) != 3:
        raise SplitError("need three parts (train, val, test)")
    if any(p < 0 for p in parts):
        raise SplitError("parts must be non-negative")
    if all(isinstance(p, (int, np.integer)) for p in parts):
        counts = [int(p) for p in parts]
    else:
        if sum(parts) > 1 + 1e-12:
            raise SplitError("fractions sum to more than 1")
        counts = [int(round(p * n)) for p in parts]
        counts[-1] = min(counts[-1], n - counts[0] - counts[1])
    if sum(counts) > n:
        raise SplitError(f"requested {sum(counts)} structures from a dataset of {n}")
    order = substream(seed, "split").permutation(n)
    out, start = [], 0
    for c in counts:
        out.append([structures[k] for k in order[start : start + c]])
        start += c
    return tuple(out)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"BAMR"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _array_entries(arrays: dict):
    index, blobs, offset = [], [], 0
    for name, value in arrays.items():
        a = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        index.append({"name": name, "offset": offset, "shape": list(a.shape), "dtype": "<f8"})
        blobs.append(a.tobytes())
        offset += a.nbytes
    return index, b"".join(blobs)


def save_checkpoint(path, cfg, kind: str, arrays: dict, meta: Optional[dict] = None) -> None:
    """Write ``arrays`` (name -> float64 array) with a JSON manifest."""
    index, payload = _array_entries(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": cfg.to_dict(),
        "kind": kind,
        "meta": meta or {},
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    config: object
    kind: str
    arrays: dict
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    from .model import ModelConfig

    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CorruptCheckpoint("file shorter than the checkpoint prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    if header_len > len(raw) - _PREFIX.size:
        raise CorruptCheckpoint("header length exceeds file size")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpoint("header format version mismatch")
    payload = raw[_PREFIX.size + header_len :]
    arrays = {}
    end = 0
    for entry in header["arrays"]:
        if entry.get("dtype") != "<f8":
            raise IncompatibleCheckpoint(f"unsupported dtype {entry.get('dtype')}")
        shape = tuple(int(d) for d in entry["shape"])
        if any(d < 0 for d in shape):
            raise CorruptCheckpoint("negative dimension in manifest")
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        stop = start + 8 * count
        if start < 0 or stop > len(payload):
            raise CorruptCheckpoint(f"array {entry['name']!r} runs past the end of the payload")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        end = max(end, stop)
    if end != len(payload):
        raise CorruptCheckpoint("payload size disagrees with the manifest")
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
    except (TypeError, ValueError) as exc:
        raise IncompatibleCheckpoint(f"model config not understood: {exc}") from None
    return Checkpoint(cfg, header["kind"], arrays, header.get("meta", {}))


def save_posterior(path, cfg, posterior) -> None:
    """Checkpoint a flat parameter vector or any posterior state."""
    from .posterior import EnsembleState, IvonState, LaplaceState, SwagState

    if isinstance(posterior, np.ndarray):
        save_checkpoint(path, cfg, "params", {"theta": posterior})
    elif isinstance(posterior, EnsembleState):
        save_checkpoint(path, cfg, "ensemble", {f"member{k}": m for k, m in enumerate(posterior.members)})
    elif isinstance(posterior, SwagState):
        arrays = {"mean": posterior.mean, "sq_mean": posterior.sq_mean}
        arrays.update({f"dev{k}": d for k, d in enumerate(posterior.deviations)})
        meta = {"n_collected": posterior.n_collected, "max_rank": posterior.max_rank, "n_dev": len(posterior.deviations)}
        save_checkpoint(path, cfg, "swag", arrays, meta)
    elif isinstance(posterior, IvonState):
        hp = posterior.hyper
        meta = {"t": posterior.t, "hyper": {f.name: getattr(hp, f.name) for f in fields(hp)}}
        save_checkpoint(path, cfg, "ivon", {"m": posterior.m, "h": posterior.h, "g": posterior.g}, meta)
    elif isinstance(posterior, LaplaceState):
        arrays = {"theta_map": posterior.theta_map, "mask": posterior.mask.astype(np.float64), "ggn_diag": posterior.ggn_diag}
        save_checkpoint(path, cfg, "laplace", arrays, {"prior_precision": posterior.prior_precision})
    else:
        raise TypeError(f"cannot checkpoint {type(posterior).__name__}")


def load_posterior(path):
    """Returns (ModelConfig, flat vector or posterior state)."""
    from .posterior import EnsembleState, IvonHyper, IvonState, LaplaceState, SwagState

    ck = load_checkpoint(path)
    a, meta = ck.arrays, ck.meta
    try:
        if ck.kind == "params":
            return ck.config, a["theta"]
        if ck.kind == "ensemble":
            return ck.config, EnsembleState([a[f"member{k}"] for k in range(len(a))])
        if ck.kind == "swag":
            devs = [a[f"dev{k}"] for k in range(meta["n_dev"])]
            return ck.config, SwagState(a["mean"], a["sq_mean"], devs, meta["n_collected"], meta["max_rank"])
        if ck.kind == "ivon":
            return ck.config, IvonState(a["m"], a["h"], a["g"], IvonHyper(**meta["hyper"]), meta["t"])
        if ck.kind == "laplace":
            return ck.config, LaplaceState(a["theta_map"], a["mask"] > 0.5, a["ggn_diag"], meta["prior_precision"])
    except KeyError as exc:
        raise CorruptCheckpoint(f"missing entry {exc}") from None
    raise IncompatibleCheckpoint(f"unknown checkpoint kind {ck.kind!r}")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    model: object
    train: object
    seed: int = 0

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "seed": self.seed}


def _build(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def run_config_from_dict(d: dict) -> RunConfig:
    from .model import ModelConfig
    from .training import TrainConfig

    if not isinstance(d, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(d) - {"model", "train", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return RunConfig(
        _build(ModelConfig, d.get("model", {}), "model"),
        _build(TrainConfig, d.get("train", {}), "train"),
        seed,
    )


def load_run_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return run_config_from_dict(data)
