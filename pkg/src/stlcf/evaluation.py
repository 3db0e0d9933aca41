"""Metrics, long-tail analysis and the reproducible experiment harness.

``run_experiment`` drives the standard comparison shape: generate (or
load) a dataset per seed, hold out a fixed test set, subsample the target
training data to each requested sparsity, fit every method, and score the
common holdout. Cells never share state, so failures are recorded per
cell and independent cells may run on a thread pool without affecting
results.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .boosting import STLCF
from .data import (DEFAULT_RATING_BOUNDS, SHARED_USERS, align_domains,
                   load_ratings, split_holdout)
from .gplsa import GPLSA, TGPLSA
from .synth import SynthConfig, generate

logger = logging.getLogger(__name__)

METHOD_KINDS = ("gplsa", "tgplsa", "stlcf-e", "stlcf-ev")


def rmse(predictions, truths):
    """Root mean squared error over aligned prediction/truth vectors."""
    predictions = np.asarray(predictions, float)
    truths = np.asarray(truths, float)
    if predictions.shape != truths.shape:
        raise ValueError("prediction and truth vectors must align")
    if predictions.size == 0:
        raise ValueError("empty test set")
    return float(np.sqrt(np.mean((truths - predictions) ** 2)))


def mae(predictions, truths):
    """Mean absolute error over aligned prediction/truth vectors."""
    predictions = np.asarray(predictions, float)
    truths = np.asarray(truths, float)
    if predictions.shape != truths.shape:
        raise ValueError("prediction and truth vectors must align")
    if predictions.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(np.abs(truths - predictions)))


LONG_TAIL_TOP = 50
LONG_TAIL_STEP = 5


def bucket_label(train_count):
    """Long-tail bucket for a user's training rating count."""
    c = int(train_count)
    if c <= 0:
        return "0"
    if c > LONG_TAIL_TOP:
        return f">{LONG_TAIL_TOP}"
    hi = ((c + LONG_TAIL_STEP - 1) // LONG_TAIL_STEP) * LONG_TAIL_STEP
    return f"{hi - LONG_TAIL_STEP + 1}-{hi}"


def bucket_order():
    labels = ["0"]
    labels += [f"{lo}-{lo + LONG_TAIL_STEP - 1}"
               for lo in range(1, LONG_TAIL_TOP, LONG_TAIL_STEP)]
    labels.append(f">{LONG_TAIL_TOP}")
    return labels


def long_tail_report(train, test, predictors):
    """Per-bucket RMSE for each named predictor.

    Test users are bucketed by their *training* rating count; empty
    buckets are omitted. ``predictors`` maps names to callables taking an
    (n, 2) array of (user, item) pairs.
    """
    counts = train.user_counts
    labels = np.array([bucket_label(counts[u]) for u in test.users])
    pairs = np.column_stack([test.users, test.items])
    preds = {name: np.asarray(fn(pairs), float)
             for name, fn in predictors.items()}

    table = {}
    for label in bucket_order():
        sel = labels == label
        if not sel.any():
            continue
        table[label] = {
            "n_ratings": int(sel.sum()),
            "n_users": int(np.unique(test.users[sel]).size),
        }
        for name in predictors:
            table[label][name] = rmse(preds[name][sel], test.ratings[sel])
    return table


@dataclass
class MethodSpec:
    """One column of the comparison table."""

    name: str
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}; "
                             f"expected one of {METHOD_KINDS}")


def build_estimator(spec, seed):
    """Instantiate the estimator for a method spec, seeding it for the run."""
    params = dict(spec.params)
    params.setdefault("seed", seed)
    if spec.kind == "gplsa":
        params = {k: v for k, v in params.items()
                  if k in ("k", "max_iters", "rel_tol", "sigma_floor",
                           "seed", "validate")}
        return GPLSA(**params)
    if spec.kind == "tgplsa":
        params = {k: v for k, v in params.items()
                  if k in ("k", "lam", "source_lambdas", "max_iters",
                           "rel_tol", "sigma_floor", "seed", "validate")}
        return TGPLSA(**params)
    if spec.kind == "stlcf-e":
        params["gamma"] = 0.0
    return STLCF(**params)


@dataclass
class ExperimentConfig:
    """Everything a comparison run needs, fully declarative.

    Exactly one of ``synth`` or ``target_path`` must be set. Each seed
    regenerates (or re-splits) the data, keeping the holdout fixed across
    sparsity levels so cells are comparable down a column.
    """

    methods: tuple
    sparsities: tuple
    seeds: tuple = (0,)
    synth: SynthConfig = None
    target_path: str = None
    source_paths: tuple = ()
    orientation: str = SHARED_USERS
    rating_bounds: tuple = DEFAULT_RATING_BOUNDS
    holdout_fraction: float = 0.3
    long_tail: bool = False
    record_alphas: bool = False

    def __post_init__(self):
        self.methods = tuple(m if isinstance(m, MethodSpec) else
                             MethodSpec(**m) for m in self.methods)
        self.sparsities = tuple(float(s) for s in self.sparsities)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.methods:
            raise ValueError("need at least one method")
        if not self.sparsities:
            raise ValueError("need at least one sparsity level")
        if (self.synth is None) == (self.target_path is None):
            raise ValueError("set exactly one of synth or target_path")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ValueError("method names must be unique")

    def to_jsonable(self):
        doc = {
            "methods": [asdict(m) for m in self.methods],
            "sparsities": list(self.sparsities),
            "seeds": list(self.seeds),
            "orientation": self.orientation,
            "rating_bounds": list(self.rating_bounds),
            "holdout_fraction": self.holdout_fraction,
            "long_tail": self.long_tail,
            "record_alphas": self.record_alphas,
        }
        if self.synth is not None:
            doc["synth"] = asdict(self.synth)
        else:
            doc["target_path"] = self.target_path
            doc["source_paths"] = list(self.source_paths)
        return doc

    def spec_hash(self):
        canon = json.dumps(self.to_jsonable(), sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def subsample_matrix(matrix, density, seed):
    """Uniformly subsample entries down to the requested cell density."""
    wanted = int(round(density * matrix.n_users * matrix.n_items))
    if wanted > matrix.nnz:
        raise ValueError(f"cannot reach density {density}: have {matrix.nnz} "
                         f"entries, need {wanted}")
    rng = np.random.default_rng([int(seed), int(round(density * 10 ** 12))])
    keep = np.sort(rng.choice(matrix.nnz, size=wanted, replace=False))
    return matrix.subset(keep)


def _sparsity_key(s):
    return f"{s:g}"


@dataclass
class MetricsReport:
    """Aggregated results of one experiment run."""

    config: dict
    spec_hash: str
    cells: dict
    long_tail: dict = None
    alphas: dict = None
    timings: dict = field(default_factory=dict, compare=False)

    def cell(self, method, sparsity):
        return self.cells[method][_sparsity_key(sparsity)]

    def to_jsonable(self):
        doc = {"config": self.config, "spec_hash": self.spec_hash,
               "cells": self.cells}
        if self.long_tail is not None:
            doc["long_tail"] = self.long_tail
        if self.alphas is not None:
            doc["alphas"] = self.alphas
        return doc


def _dataset_for_seed(cfg, seed, file_cache):
    if cfg.synth is not None:
        data, _ = generate(replace(cfg.synth, seed=seed))
        return data
    if not file_cache:
        target = load_ratings(cfg.target_path, rating_bounds=cfg.rating_bounds)
        sources = [load_ratings(p, rating_bounds=cfg.rating_bounds)
                   for p in cfg.source_paths]
        file_cache["data"] = align_domains(target, sources, cfg.orientation)
    return file_cache["data"]


def _assert_holdout_hygiene(train, test):
    train_pairs = set(zip(train.users.tolist(), train.items.tolist()))
    test_pairs = set(zip(test.users.tolist(), test.items.tolist()))
    if train_pairs & test_pairs:
        raise AssertionError("holdout leak: test entries present in training")


def _run_cell(spec, train_collection, test, seed, cfg):
    """Fit one method on one training view; score on the common holdout."""
    started = time.perf_counter()
    out = {"error": None}
    try:
        est = build_estimator(spec, seed)
        est.fit(train_collection)
        pairs = np.column_stack([test.users, test.items])
        preds = est.predict(pairs)
        out["rmse"] = rmse(preds, test.ratings)
        out["mae"] = mae(preds, test.ratings)
        if cfg.long_tail:
            out["long_tail"] = long_tail_report(
                train_collection.target, test, {spec.name: est.predict})
        if cfg.record_alphas and hasattr(est, "round_records_"):
            out["alphas"] = [r.alpha for r in est.round_records_]
    except Exception as exc:  # recorded, not raised: one bad cell
        logger.warning("cell (%s, seed=%s) failed: %s", spec.name, seed, exc)
        out["error"] = f"{type(exc).__name__}: {exc}"
    out["seconds"] = time.perf_counter() - started
    return out


def run_experiment(cfg, n_threads=1):
    """Run the full (method x sparsity x seed) grid and aggregate."""
    file_cache = {}
    jobs = {}
    with ThreadPoolExecutor(max_workers=max(1, int(n_threads))) as pool:
        for seed in cfg.seeds:
            data = _dataset_for_seed(cfg, seed, file_cache)
            split = split_holdout(data.target, cfg.holdout_fraction, seed)
            for sparsity in cfg.sparsities:
                try:
                    train = subsample_matrix(split.train, sparsity, seed)
                except ValueError as exc:
                    for spec in cfg.methods:
                        jobs[(spec.name, sparsity, seed)] = {
                            "error": f"ValueError: {exc}", "seconds": 0.0}
                    continue
                _assert_holdout_hygiene(train, split.test)
                train_collection = data.replace_target(train)
                for spec in cfg.methods:
                    jobs[(spec.name, sparsity, seed)] = pool.submit(
                        _run_cell, spec, train_collection, split.test, seed,
                        cfg)
        results = {key: (job.result() if hasattr(job, "result") else job)
                   for key, job in jobs.items()}

    cells = {}
    long_tail = {} if cfg.long_tail else None
    alphas = {} if cfg.record_alphas else None
    timings = {}
    for spec in cfg.methods:
        cells[spec.name] = {}
        for sparsity in cfg.sparsities:
            key = _sparsity_key(sparsity)
            per_seed = [results[(spec.name, sparsity, seed)]
                        for seed in cfg.seeds]
            ok = [r for r in per_seed if r["error"] is None]
            cell = {
                "rmse_per_seed": [r.get("rmse") for r in per_seed],
                "mae_per_seed": [r.get("mae") for r in per_seed],
                "errors": [r["error"] for r in per_seed],
                "n_ok": len(ok),
            }
            if ok:
                cell["rmse_mean"] = float(np.mean([r["rmse"] for r in ok]))
                cell["rmse_std"] = float(np.std([r["rmse"] for r in ok]))
                cell["mae_mean"] = float(np.mean([r["mae"] for r in ok]))
                cell["mae_std"] = float(np.std([r["mae"] for r in ok]))
            cells[spec.name][key] = cell
            timings[f"{spec.name}@{key}"] = float(
                sum(r["seconds"] for r in per_seed))
            if cfg.long_tail:
                long_tail.setdefault(spec.name, {})[key] = \
                    _merge_long_tail([r.get("long_tail") for r in ok],
                                     spec.name)
            if cfg.record_alphas:
                traces = [r.get("alphas") for r in ok if r.get("alphas")]
                if traces:
                    alphas.setdefault(spec.name, {})[key] = traces

    return MetricsReport(config=cfg.to_jsonable(), spec_hash=cfg.spec_hash(),
                         cells=cells, long_tail=long_tail, alphas=alphas,
                         timings=timings)


def _merge_long_tail(per_seed_tables, method):
    """Mean per-bucket RMSE over the seeds where the bucket was non-empty."""
    merged = {}
    for label in bucket_order():
        values = [t[label][method] for t in per_seed_tables
                  if t is not None and label in t]
        if values:
            merged[label] = {
                "rmse_mean": float(np.mean(values)),
                "n_seeds": len(values),
            }
    return merged


SWEEPABLE = {
    "tau": ("stlcf-e", "stlcf-ev"),
    "gamma": ("stlcf-ev",),
    "n_rounds": ("stlcf-e", "stlcf-ev"),
    "k": METHOD_KINDS,
    "lam": ("tgplsa", "stlcf-e", "stlcf-ev"),
}


def sweep(param, grid, base_cfg, n_threads=1):
    """Re-run the experiment per grid point, varying one hyperparameter.

    The parameter is applied to every method whose kind supports it;
    others repeat unchanged. For ``n_rounds`` sweeps the per-round alpha
    traces are recorded as well.
    """
    if param not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param!r}; one of {sorted(SWEEPABLE)}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid must be non-empty")

    rows = []
    reports = []
    for value in grid:
        methods = []
        for spec in base_cfg.methods:
            params = dict(spec.params)
            if spec.kind in SWEEPABLE[param]:
                params[param] = value
            methods.append(MethodSpec(spec.name, spec.kind, params))
        cfg_v = replace(base_cfg, methods=tuple(methods),
                        record_alphas=base_cfg.record_alphas
                        or param == "n_rounds")
        report = run_experiment(cfg_v, n_threads=n_threads)
        reports.append(report)
        for spec in methods:
            for sparsity in cfg_v.sparsities:
                cell = report.cell(spec.name, sparsity)
                rows.append({
                    "param": param,
                    "value": value,
                    "method": spec.name,
                    "sparsity": sparsity,
                    "rmse_mean": cell.get("rmse_mean"),
                    "rmse_std": cell.get("rmse_std"),
                    "n_ok": cell["n_ok"],
                })
    return {"param": param, "grid": grid, "rows": rows, "reports": reports}


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("" if v is None else f"{v}" for v in row) + "\n")


def save_report(report, outdir):
    """Write report JSON + CSV tables; timings go to a separate, explicitly
    non-deterministic run_info file."""
    os.makedirs(outdir, exist_ok=True)
    tag = report.spec_hash
    _write_json(os.path.join(outdir, f"report_{tag}.json"),
                report.to_jsonable())

    rows = []
    for method, by_sparsity in report.cells.items():
        for key, cell in by_sparsity.items():
            rows.append([method, key, cell.get("rmse_mean"),
                         cell.get("rmse_std"), cell.get("mae_mean"),
                         cell.get("mae_std"), cell["n_ok"]])
    _write_csv(os.path.join(outdir, f"cells_{tag}.csv"),
               ["method", "sparsity", "rmse_mean", "rmse_std", "mae_mean",
                "mae_std", "n_ok"], rows)

    if report.long_tail:
        rows = []
        for method, by_sparsity in report.long_tail.items():
            for key, buckets in by_sparsity.items():
                for label, stats in buckets.items():
                    rows.append([method, key, label, stats["rmse_mean"],
                                 stats["n_seeds"]])
        _write_csv(os.path.join(outdir, f"long_tail_{tag}.csv"),
                   ["method", "sparsity", "bucket", "rmse_mean", "n_seeds"],
                   rows)

    _write_json(os.path.join(outdir, "run_info.json"),
                {"timings_seconds": report.timings})
    return tag


def save_sweep(result, outdir, spec_hash):
    """Write the sweep curve CSV (plus alpha traces for round sweeps)."""
    os.makedirs(outdir, exist_ok=True)
    param = result["param"]
    path = os.path.join(outdir, f"sweep_{param}_{spec_hash}.csv")
    _write_csv(path,
               ["param", "value", "method", "sparsity", "rmse_mean",
                "rmse_std", "n_ok"],
               [[r["param"], r["value"], r["method"], r["sparsity"],
                 r["rmse_mean"], r["rmse_std"], r["n_ok"]]
                for r in result["rows"]])
    if param == "n_rounds":
        traces = {f"value={v}": (rep.alphas or {})
                  for v, rep in zip(result["grid"], result["reports"])}
        _write_json(os.path.join(outdir, f"alphas_{param}_{spec_hash}.json"),
                    traces)
    return path
