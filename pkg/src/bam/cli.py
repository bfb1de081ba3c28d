"""`bam` command line: one subcommand per workflow stage, files in and out.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import uq
from .active_learning import MANIFEST_HEADER, al_round, manifest_rows, score_pool, select, structure_ids
from .errors import BamError, ConfigError
from .io import (
    RunConfig,
    format_extxyz,
    load_checkpoint,
    load_posterior,
    read_extxyz,
    run_config_from_dict,
    save_posterior,
    split,
    substream,
)
from .posterior import laplace_fit, member_moments
from .training import LOG_HEADER, evaluate, predictions, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# helpers


def _write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _read_data(path, args):
    return read_extxyz(path, energy_key=args.energy_key, forces_key=args.forces_key).structures


def _run_config(args, data=None) -> RunConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
    raw = dict(raw)
    model = dict(raw.get("model", {}))
    if "species_list" not in model and data is not None:
        model["species_list"] = sorted({int(z) for s in data for z in s.species})
    raw["model"] = model
    rc = run_config_from_dict(raw)
    if args.seed is not None:
        rc = replace(rc, seed=args.seed)
    return rc


def _with_ids(structures, prefix="s"):
    for k, s in enumerate(structures):
        s.info.setdefault("id", f"{prefix}{k}")
    return structures


def _splits(args, data, seed):
    if args.val:
        return data, _read_data(args.val, args)
    n_val = int(round(args.val_fraction * len(data)))
    tr, va, _ = split(data, (len(data) - n_val, n_val, 0), seed)
    return tr, va


def _log_csv(log, header=LOG_HEADER) -> str:
    if log and len(log[0]) == len(header) + 1:
        header = ("member",) + tuple(header)
    return uq.csv_text(header, log)


def _n_samples(args, rc):
    return args.samples if getattr(args, "samples", None) is not None else rc.train.n_samples


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, posterior=None):
    data = _with_ids(_read_data(args.data, args))
    rc = _run_config(args, data)
    tcfg = rc.train
    if posterior is not None:
        changes = {"posterior": posterior}
        if posterior == "ensemble":
            if args.members is not None:
                changes["n_members"] = args.members
            changes["jobs"] = args.jobs
        tcfg = replace(tcfg, **changes)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    tr, va = _splits(args, data, rc.seed)
    result = train(tr, va, rc.model, tcfg, rc.seed)
    save_posterior(args.out, rc.model, result.model)
    if args.log:
        _write(args.log, _log_csv(result.log))
    return 0


def cmd_laplace(args):
    rc_cfg, theta = load_posterior(args.checkpoint)
    if not isinstance(theta, np.ndarray):
        raise ConfigError("laplace-fit needs a point-estimate checkpoint")
    data = _read_data(args.data, args)
    prior = args.prior_precision
    if prior is None:
        prior = _run_config(args).train.laplace_prior if args.config else 1.0
    state = laplace_fit(rc_cfg, theta, data, prior)
    save_posterior(args.out, rc_cfg, state)
    return 0


def _prediction_records(structures, preds):
    lines = []
    for sid, p in zip(structure_ids(structures), preds):
        rec = {"id": sid, "energy": p.energy_mean, "forces": p.force_mean.tolist()}
        if p.energy_var is not None:
            rec["energy_var"] = p.energy_var
        if p.energy_epistemic is not None:
            rec["energy_epistemic"] = p.energy_epistemic
            rec["energy_aleatoric"] = p.energy_aleatoric
        if p.force_cov is not None:
            rec["force_cov"] = p.force_cov.tolist()
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def cmd_predict(args):
    cfg, model = load_posterior(args.checkpoint)
    rc = _run_config(args) if args.config else None
    data = _read_data(args.data, args)
    preds = predictions(model, cfg, data, _n_samples(args, rc) if rc else (args.samples or 10), args.seed or 0)
    _write(args.out, _prediction_records(data, preds))
    return 0


def _eval(args):
    cfg, model = load_posterior(args.checkpoint)
    rc = _run_config(args) if args.config else None
    data = _read_data(args.data, args)
    n = _n_samples(args, rc) if rc else (args.samples or 10)
    return evaluate(model, cfg, data, n, args.seed or 0, args.levels)


def cmd_evaluate(args):
    rep = _eval(args)
    _write(args.out, uq.metric_lines(rep.metrics))
    if args.energy_csv:
        rows = [(sd, abs(p - r)) for r, p, sd in rep.energy]
        _write(args.energy_csv, uq.csv_text(("sd", "abs_error"), rows))
    if args.force_csv:
        rows = [(sd, abs(p - r)) for r, p, sd in rep.forces]
        _write(args.force_csv, uq.csv_text(("sd", "abs_error"), rows))
    return 0


def cmd_calibrate(args):
    rep = _eval(args)
    maps = _load_maps(args.map) if args.map else {}
    out = []
    metrics = {}
    for name, arr in (("energy", rep.energy), ("force", rep.forces)):
        curve = uq.reliability_curve(arr[:, 1] - arr[:, 0], arr[:, 2], args.levels, maps.get(name))
        metrics[f"{name}_ce"] = float(np.mean((curve.levels - curve.observed) ** 2))
        out.extend((name, a, b) for a, b in curve.rows())
    _write(args.out, uq.csv_text(("channel", "level", "observed"), out))
    if args.metrics_out:
        _write(args.metrics_out, uq.metric_lines(metrics))
    return 0


def _load_maps(path) -> dict:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: uq.CalibrationMap.from_dict(v) for k, v in d.items()}


def cmd_recalibrate(args):
    rep = _eval(args)
    maps = {
        "energy": uq.recalibrate_fit(rep.energy[:, 1] - rep.energy[:, 0], rep.energy[:, 2]),
        "force": uq.recalibrate_fit(rep.forces[:, 1] - rep.forces[:, 0], rep.forces[:, 2]),
    }
    _write(args.out, json.dumps({k: v.to_dict() for k, v in maps.items()}, sort_keys=True) + "\n")
    if args.metrics_out:
        metrics = {}
        for name, arr in (("energy", rep.energy), ("force", rep.forces)):
            r, sd = arr[:, 1] - arr[:, 0], arr[:, 2]
            metrics[f"{name}_ce_before"] = uq.calibration_error(r, sd, args.levels)
            metrics[f"{name}_ce_after"] = uq.calibration_error(r, sd, args.levels, maps[name])
        _write(args.metrics_out, uq.metric_lines(metrics))
    return 0


def cmd_ood(args):
    cfg, model = load_posterior(args.checkpoint)
    rc = _run_config(args) if args.config else None
    n = _n_samples(args, rc) if rc else (args.samples or 10)
    seed = args.seed or 0
    id_data = _read_data(args.id_data, args)
    ood_data = _read_data(args.ood_data, args)
    sd = lambda data: np.sqrt([p.energy_var if p.energy_var is not None else 0.0 for p in predictions(model, cfg, data, n, seed)])
    s_id, s_ood = sd(id_data), sd(ood_data)
    _write(args.out, uq.metric_lines({"auroc": uq.auroc(s_id, s_ood)}))
    if args.scores_csv:
        rows = [(sid, "id", v) for sid, v in zip(structure_ids(id_data), s_id)]
        rows += [(sid, "ood", v) for sid, v in zip(structure_ids(ood_data), s_ood)]
        _write(args.scores_csv, uq.csv_text(("id", "set", "sigma_e"), rows))
    return 0


def _pool_scores(args, cfg, model, pool):
    rc = _run_config(args) if args.config else None
    n = _n_samples(args, rc) if rc else (args.samples or 10)
    seed = args.seed or 0
    moments = member_moments(model, cfg, pool, n, substream(seed, "selection"))
    return score_pool(moments, structure_ids(pool), args.force_reduce)


def cmd_al_select(args):
    cfg, model = load_posterior(args.checkpoint)
    if isinstance(model, np.ndarray):
        raise ConfigError("BALD scoring needs a posterior checkpoint, not a point estimate")
    pool = _with_ids(_read_data(args.pool, args), "p")
    scores = _pool_scores(args, cfg, model, pool)
    records = select(scores, args.strategy, args.budget, args.seed or 0)
    _write(args.out, uq.csv_text(MANIFEST_HEADER, manifest_rows(records)))
    return 0


def cmd_al_round(args):
    cfg, model = load_posterior(args.checkpoint)
    if isinstance(model, np.ndarray):
        raise ConfigError("al-round needs a posterior checkpoint")
    train_set = _with_ids(_read_data(args.train, args), "t")
    pool = _with_ids(_read_data(args.pool, args), "p")
    test = _read_data(args.test, args) if args.test else []
    rc = _run_config(args, train_set)
    rc = replace(rc, model=cfg)
    seed = rc.seed
    n = _n_samples(args, rc)
    tcfg = replace(rc.train, posterior=model.kind if model.kind != "laplace" else "laplace")

    def retrain(structures):
        return train(structures, [], cfg, tcfg, seed + 1).model

    def metrics(post):
        return evaluate(post, cfg, test, n, seed).metrics if test else {}

    res = al_round(train_set, pool, args.budget, args.strategy, model, cfg, retrain, metrics, seed, n)
    save_posterior(args.out, cfg, res.posterior)
    Path(args.out_train).write_text(format_extxyz(res.train), encoding="utf-8")
    Path(args.out_pool).write_text(format_extxyz(res.pool) if res.pool else "", encoding="utf-8")
    if args.manifest:
        _write(args.manifest, uq.csv_text(MANIFEST_HEADER, manifest_rows(res.records)))
    if args.metrics_out:
        _write(args.metrics_out, uq.metric_lines(res.metrics))
    return 0


def cmd_score(args):
    with open(args.rows, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError("no cohort rows")
    cohort = uq.CohortNorm.from_rows([float(r["e_ce"]) for r in rows], [float(r["f_ce"]) for r in rows])
    scores = {
        r["model"]: uq.composite_score(
            float(r["e_rmse"]), float(r["f_rmse"]), float(r["e_ce"]), float(r["f_ce"]), float(r["auroc"]), cohort
        )
        for r in rows
    }
    _write(args.out, uq.metric_lines({f"score/{k}": v for k, v in scores.items()}))
    return 0


def cmd_inspect(args):
    ck = load_checkpoint(args.checkpoint)
    summary = {
        "kind": ck.kind,
        "model_config": ck.config.to_dict(),
        "meta": ck.meta,
        "arrays": {k: list(v.shape) for k, v in ck.arrays.items()},
    }
    text = json.dumps(summary, sort_keys=True, indent=2) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bam", description="Uncertainty-aware equivariant interatomic potentials.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def command(name, help_text, func):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run config JSON (model, train, seed)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.set_defaults(func=func)
        return p

    def data_keys(p):
        p.add_argument("--energy-key", default="energy", help="frame key holding the energy")
        p.add_argument("--forces-key", default="forces", help="per-atom property holding forces")

    def training(p):
        p.add_argument("--data", required=True, help="training extxyz")
        p.add_argument("--val", help="validation extxyz (default: split off --val-fraction)")
        p.add_argument("--val-fraction", type=float, default=0.1)
        p.add_argument("--epochs", type=int, help="override train.epochs")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--log", help="training log CSV")
        data_keys(p)

    def predictive(p, data_flag="--data"):
        p.add_argument("--checkpoint", required=True)
        if data_flag:
            p.add_argument(data_flag, required=True, help="labelled extxyz")
        p.add_argument("--samples", type=int, help="posterior samples (default train.n_samples)")
        data_keys(p)

    p = command("train", "train a single model", lambda a: cmd_train(a))
    training(p)
    p = command("ensemble-train", "train a deep ensemble", lambda a: cmd_train(a, "ensemble"))
    training(p)
    p.add_argument("--members", type=int, help="ensemble size (default train.n_members)")
    p.add_argument("--jobs", type=int, default=1, help="member training processes")
    p = command("swag-train", "train with SWAG moment collection", lambda a: cmd_train(a, "swag"))
    training(p)
    p = command("ivon-train", "train with the IVON optimizer", lambda a: cmd_train(a, "ivon"))
    training(p)

    p = command("laplace-fit", "fit a last-layer Laplace posterior to a trained model", cmd_laplace)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="calibration extxyz")
    p.add_argument("--prior-precision", type=float)
    p.add_argument("--out", required=True)
    data_keys(p)

    p = command("predict", "write predictive distributions as JSON lines", cmd_predict)
    predictive(p)
    p.add_argument("--out", required=True)

    p = command("evaluate", "accuracy and calibration metrics", cmd_evaluate)
    predictive(p)
    p.add_argument("--out", required=True, help="metrics, one JSON object per line")
    p.add_argument("--energy-csv", help="energy scatter data (sd, abs_error)")
    p.add_argument("--force-csv", help="force-component scatter data (sd, abs_error)")
    p.add_argument("--levels", type=int, default=100)

    p = command("calibrate", "reliability curves (level, observed)", cmd_calibrate)
    predictive(p)
    p.add_argument("--map", help="recalibration map JSON to apply")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics-out")
    p.add_argument("--levels", type=int, default=100)

    p = command("recalibrate", "fit isotonic recalibration maps", cmd_recalibrate)
    predictive(p)
    p.add_argument("--out", required=True, help="map JSON")
    p.add_argument("--metrics-out")
    p.add_argument("--levels", type=int, default=100)

    p = command("ood-score", "AUROC of energy uncertainty between ID and OOD sets", cmd_ood)
    predictive(p, data_flag=None)
    p.add_argument("--id-data", required=True)
    p.add_argument("--ood-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scores-csv")

    p = command("al-select", "select pool structures by acquisition score", cmd_al_select)
    predictive(p, data_flag="--pool")
    p.add_argument("--strategy", required=True, type=str.lower, choices=["random", "bald_e", "bald_f", "bald_ef"])
    p.add_argument("--budget", required=True, type=int)
    p.add_argument("--force-reduce", default="max", choices=["max", "mean"])
    p.add_argument("--out", required=True, help="manifest CSV")

    p = command("al-round", "select, augment the training set and retrain", cmd_al_round)
    predictive(p, data_flag=None)
    p.add_argument("--train", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--test")
    p.add_argument("--strategy", required=True, type=str.lower, choices=["random", "bald_e", "bald_f", "bald_ef"])
    p.add_argument("--budget", required=True, type=int)
    p.add_argument("--out", required=True, help="retrained posterior checkpoint")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-pool", required=True)
    p.add_argument("--manifest")
    p.add_argument("--metrics-out")

    p = command("score", "composite benchmark score over a cohort CSV", cmd_score)
    p.add_argument("--rows", required=True, help="CSV with model,e_rmse,f_rmse,e_ce,f_ce,auroc")
    p.add_argument("--out", required=True)

    p = command("inspect-checkpoint", "print a checkpoint manifest", cmd_inspect)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (BamError, ValueError, OSError, KeyError) as exc:
        sys.stderr.write(f"bam {args.command}: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
