"""Command-line entry point: synth / train / predict / experiment.

Every command takes an optional JSON config file plus flag overrides
(flags win) and serializes the effective configuration next to its
outputs, so any run can be reproduced byte-for-byte from that file at a
fixed thread count. Exit codes: 0 success, 1 usage or config error,
2 runtime or model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from .boosting import save_ensemble
from .data import align_domains, load_ratings
from .evaluation import (ExperimentConfig, MethodSpec, build_estimator,
                         run_experiment, save_report, save_sweep, sweep)
from .gplsa import save_model
from .synth import SynthConfig, generate, write_dataset

logger = logging.getLogger("stlcf")

METHODS = ("gplsa", "tgplsa", "stlcf-e", "stlcf-ev")

TRAIN_PARAM_KEYS = ("k", "lam", "tau", "gamma", "n_rounds", "max_iters",
                    "rel_tol", "sigma_floor", "beta_refresh_every",
                    "alpha_max")


class CliError(Exception):
    """Usage or configuration problem (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _read_json(path, what):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"could not parse {what} file {path}: {exc}")


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _jsonable(value):
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def build_parser():
    parser = _Parser(prog="stlcf",
                     description="Cross-domain collaborative filtering with "
                                 "selective transfer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON file with generator settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model or ensemble")
    p.add_argument("--config", help="JSON file mirroring the flags")
    p.add_argument("--target", help="target ratings file")
    p.add_argument("--source", action="append", dest="sources", default=None,
                   help="source ratings file (repeatable)")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--orientation", choices=("shared-users", "shared-items"))
    p.add_argument("--k", type=int)
    p.add_argument("--lambda", dest="lam", type=float,
                   help="source likelihood share in (0, 1)")
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("-T", "--rounds", dest="n_rounds", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--beta-refresh-every", dest="beta_refresh_every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="model output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score user,item pairs with a model")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True, help="file of user,item lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run a declarative experiment spec")
    p.add_argument("--spec", required=True, help="experiment spec JSON")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)
    return parser


def cmd_synth(args):
    settings = _read_json(args.config, "config") if args.config else {}
    if args.seed is not None:
        settings["seed"] = args.seed
    for key in ("n_source_items", "source_densities", "rating_bounds"):
        if key in settings:
            settings[key] = tuple(settings[key])
    if settings.get("activity_levels") is not None:
        settings["activity_levels"] = tuple(
            tuple(level) for level in settings["activity_levels"])
    try:
        cfg = SynthConfig(**settings)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid synth config: {exc}")

    data, truth = generate(cfg)
    paths, sidecar = write_dataset(data, truth, cfg, args.out)
    _write_json(os.path.join(args.out, "effective_config.json"),
                _jsonable(asdict(cfg)))
    print(f"wrote {len(paths)} ratings files and {os.path.basename(sidecar)} "
          f"to {args.out}")
    return 0


def _effective_train_config(args):
    cfg = _read_json(args.config, "config") if args.config else {}
    for key in ("target", "method", "orientation", "seed", *TRAIN_PARAM_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if args.sources is not None:
        cfg["sources"] = args.sources
    cfg.setdefault("sources", [])
    cfg.setdefault("orientation", "shared-users")
    cfg.setdefault("seed", 0)
    if not cfg.get("target"):
        raise CliError("a target ratings file is required (--target)")
    if cfg.get("method") not in METHODS:
        raise CliError(f"--method must be one of {METHODS}")
    return cfg


def _write_trace(path, names, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(names) + "\n")
        for row in rows:
            fh.write(",".join(f"{v}" for v in row) + "\n")


def cmd_train(args):
    cfg = _effective_train_config(args)
    method = cfg["method"]
    if method == "gplsa" and cfg["sources"]:
        print("warning: sources ignored for gplsa", file=sys.stderr)

    try:
        target = load_ratings(cfg["target"])
        sources = [load_ratings(p) for p in cfg["sources"]]
    except FileNotFoundError as exc:
        raise CliError(f"ratings file not found: {exc.filename}")
    data = align_domains(target, sources, cfg["orientation"])

    params = {k: cfg[k] for k in TRAIN_PARAM_KEYS if k in cfg}
    est = build_estimator(MethodSpec(method, method, params), cfg["seed"])
    est.fit(data)

    meta = {
        "method": method,
        "orientation": cfg["orientation"],
        "user_ids": list(data.target.user_ids),
        "item_ids": list(data.target.item_ids),
        "global_mean": data.target.global_mean(),
        "config": cfg,
    }
    if method in ("stlcf-e", "stlcf-ev"):
        save_ensemble(args.out, est.ensemble_, meta=meta)
        _write_trace(args.out + ".trace.csv",
                     ["round", "alpha", "train_rmse", "kept"],
                     [(r.round_index, r.alpha, r.train_rmse, int(r.kept))
                      for r in est.round_records_])
    else:
        save_model(args.out, est.model_, est.nll_trace_, meta=meta)
        _write_trace(args.out + ".trace.csv", ["iteration", "objective"],
                     list(enumerate(est.nll_trace_)))
    _write_json(args.out + ".config.json", _jsonable(cfg))
    print(f"wrote {args.out}")
    return 0


class _Bundle:
    """A loaded model or ensemble plus the id maps to drive it."""

    def __init__(self, path):
        doc = _read_json(path, "model")
        if doc.get("format") == "stlcf-ensemble":
            from .boosting import ensemble_from_dict
            self.predictor, meta = ensemble_from_dict(doc)
            self.means = self.predictor.learners[0].item_means[0]
            self._committee = True
        elif doc.get("format") == "stlcf-model":
            from .gplsa import model_from_dict
            self.predictor, _, meta = model_from_dict(doc)
            self.means = self.predictor.item_means[0]
            self._committee = False
        else:
            raise CliError(f"{path} is not a model or ensemble file")
        if not meta.get("user_ids"):
            raise CliError(f"{path} carries no id maps; was it written by "
                           f"'stlcf train'?")
        self.meta = meta
        self.user_index = {u: j for j, u in enumerate(meta["user_ids"])}
        self.item_index = {i: j for j, i in enumerate(meta["item_ids"])}
        self.flip = meta.get("orientation") == "shared-items"
        self.global_mean = float(meta["global_mean"])
        self.bounds = tuple(self.predictor.rating_bounds)

    def _predict_index(self, row, col):
        if self._committee:
            return float(self.predictor.predict([row], [col])[0])
        return self.predictor.predict_one(row, col)

    def _predict_cold_row(self, col):
        # unseen shared-axis entity: uniform taste, i.e. the plain topic
        # average of the column's means
        if self._committee:
            members = self.predictor.learners
            shares = self.predictor.alphas / self.predictor.alphas.sum()
            value = sum(s * m.item_means[0][col].mean()
                        for s, m in zip(shares, members))
        else:
            value = self.predictor.item_means[0][col].mean()
        lo, hi = self.bounds
        return float(np.clip(value, lo, hi))

    def predict_ids(self, user_id, item_id):
        """(prediction, warning-or-None) for external ids."""
        u = self.user_index.get(user_id)
        i = self.item_index.get(item_id)
        row, col = (i, u) if self.flip else (u, i)
        if col is None:
            which = "user" if self.flip else "item"
            missing = user_id if self.flip else item_id
            return self.global_mean, f"unknown {which} id {missing!r}"
        if row is None:
            return self._predict_cold_row(col), None
        return self._predict_index(row, col), None


def cmd_predict(args):
    bundle = _Bundle(args.model)
    try:
        with open(args.pairs, "r", encoding="utf-8") as fh:
            raw_lines = fh.readlines()
    except FileNotFoundError:
        raise CliError(f"pairs file not found: {args.pairs}")

    warnings = 0
    written = 0
    with open(args.out, "w", encoding="utf-8") as out:
        for number, raw in enumerate(raw_lines, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise ValueError(f"pairs file line {number}: expected "
                                 f"'user,item', got {line!r}")
            prediction, warning = bundle.predict_ids(parts[0], parts[1])
            if warning:
                warnings += 1
                print(f"warning: line {number}: {warning}; "
                      f"falling back to the global mean", file=sys.stderr)
            out.write(f"{parts[0]},{parts[1]},{prediction!r}\n")
            written += 1
    print(f"wrote {written} predictions to {args.out} ({warnings} warnings)")
    return 0


def _experiment_config(doc):
    methods = doc.get("methods")
    if not methods:
        raise CliError("experiment spec needs a non-empty 'methods' list")
    kwargs = {
        "methods": tuple(MethodSpec(m["name"], m["kind"],
                                    dict(m.get("params", {})))
                         for m in methods),
        "sparsities": tuple(doc.get("sparsities", ())),
        "seeds": tuple(doc.get("seeds", (0,))),
        "holdout_fraction": doc.get("holdout_fraction", 0.3),
        "orientation": doc.get("orientation", "shared-users"),
        "long_tail": doc.get("long_tail", False),
        "record_alphas": doc.get("record_alphas", False),
    }
    if "rating_bounds" in doc:
        kwargs["rating_bounds"] = tuple(doc["rating_bounds"])
    if "synth" in doc:
        synth = dict(doc["synth"])
        for key in ("n_source_items", "source_densities", "rating_bounds"):
            if key in synth:
                synth[key] = tuple(synth[key])
        if synth.get("activity_levels") is not None:
            synth["activity_levels"] = tuple(
                tuple(level) for level in synth["activity_levels"])
        kwargs["synth"] = SynthConfig(**synth)
    else:
        kwargs["target_path"] = doc.get("target_path")
        kwargs["source_paths"] = tuple(doc.get("source_paths", ()))
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid experiment spec: {exc}")


def cmd_experiment(args):
    doc = _read_json(args.spec, "spec")
    cfg = _experiment_config(doc)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "effective_config.json"),
                {"spec": doc, "threads": args.threads})

    sweep_spec = doc.get("sweep")
    if sweep_spec:
        result = sweep(sweep_spec["param"], sweep_spec["grid"], cfg,
                       n_threads=args.threads)
        save_sweep(result, args.out, cfg.spec_hash())
        reports = result["reports"]
    else:
        reports = [run_experiment(cfg, n_threads=args.threads)]
        save_report(reports[0], args.out)

    total = ok = 0
    for report in reports:
        for by_sparsity in report.cells.values():
            for cell in by_sparsity.values():
                total += len(cell["errors"])
                ok += cell["n_ok"]
    if ok == 0:
        print(f"error: all {total} cells failed", file=sys.stderr)
        return 2
    if ok < total:
        print(f"warning: {total - ok} of {total} cells failed",
              file=sys.stderr)
    print(f"wrote report(s) to {args.out} ({ok}/{total} cells ok)")
    return 0


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("STLCF_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
