"""Synthetic cross-domain rating data with controllable source inconsistency.

Users share one latent taste vector across all domains; every domain has
its own per-item, per-topic rating means. A configurable fraction of each
source's items is made *inconsistent*: their means are re-drawn and, more
importantly, their ratings follow the taste vector of a shuffled user
rather than the rater's own. Those columns carry sharp but misattributed
preference evidence, the kind of cross-domain disagreement the selective
transfer layer is supposed to detect and down-weight.

Optionally, per-user activity multipliers skew how many ratings each user
produces (long-tail populations); multipliers are rescaled to mean 1 so
the configured density still holds in expectation.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import (DEFAULT_RATING_BOUNDS, AlignedCollection, RatingsMatrix,
                   write_ratings)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 500
    n_target_items: int = 200
    n_source_items: tuple = (200,)
    k_true: int = 5
    target_density: float = 0.02
    source_densities: tuple = (0.05,)
    inconsistency_rho: float = 0.0
    noise_sigma: float = 0.5
    rating_bounds: tuple = DEFAULT_RATING_BOUNDS
    topic_concentration: float = 0.3
    activity_levels: tuple = None  # ((probability, multiplier), ...)
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_target_items, self.k_true) < 1:
            raise ValueError("counts must be >= 1")
        object.__setattr__(self, "n_source_items",
                           tuple(int(n) for n in self.n_source_items))
        object.__setattr__(self, "source_densities",
                           tuple(float(d) for d in self.source_densities))
        if any(n < 1 for n in self.n_source_items):
            raise ValueError("counts must be >= 1")
        if len(self.n_source_items) != len(self.source_densities):
            raise ValueError("need one density per source domain")
        for d in (self.target_density, *self.source_densities):
            if not 0.0 < d <= 1.0:
                raise ValueError("densities must be in (0, 1]")
        if not 0.0 <= self.inconsistency_rho <= 1.0:
            raise ValueError("inconsistency_rho must be in [0, 1]")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.topic_concentration <= 0:
            raise ValueError("topic_concentration must be positive")
        if self.activity_levels is not None:
            levels = tuple((float(p), float(m)) for p, m in self.activity_levels)
            if not levels:
                raise ValueError("activity_levels must be non-empty when given")
            probs = np.array([p for p, _ in levels])
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
                raise ValueError("activity probabilities must sum to 1")
            if any(m <= 0 for _, m in levels):
                raise ValueError("activity multipliers must be positive")
            object.__setattr__(self, "activity_levels", levels)

    @property
    def n_sources(self):
        return len(self.n_source_items)


@dataclass
class GroundTruth:
    """What the generator actually used, for oracle-style checks."""

    user_topics: np.ndarray
    item_means: tuple
    inconsistent_items: tuple
    taste_shuffles: tuple
    activity_multipliers: np.ndarray


def _activity_multipliers(cfg, rng):
    if cfg.activity_levels is None:
        return np.ones(cfg.n_users)
    probs = np.array([p for p, _ in cfg.activity_levels])
    mults = np.array([m for _, m in cfg.activity_levels])
    mults = mults / (probs * mults).sum()  # preserve expected density
    picks = rng.choice(len(mults), size=cfg.n_users, p=probs)
    return mults[picks]


def _draw_topics(dist_rows, rng_values):
    """Inverse-CDF topic draws, one categorical row per entry."""
    cum = np.cumsum(dist_rows, axis=1)
    return np.argmax(rng_values[:, None] < cum, axis=1)


def generate(cfg):
    """Draw one aligned dataset plus its ground truth.

    Pure function of the config; identical configs give identical data.
    """
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.rating_bounds
    alpha = np.full(cfg.k_true, cfg.topic_concentration)

    user_topics = rng.dirichlet(alpha, size=cfg.n_users)
    activity = _activity_multipliers(cfg, rng)

    sizes = (cfg.n_target_items, *cfg.n_source_items)
    means, inconsistent, shuffles = [], [], []
    for d, n_items in enumerate(sizes):
        mu = rng.uniform(lo, hi, size=(n_items, cfg.k_true))
        if d == 0:
            means.append(mu)
            continue
        n_bad = int(round(cfg.inconsistency_rho * n_items))
        bad = np.sort(rng.choice(n_items, size=n_bad, replace=False))
        mu[bad] = rng.uniform(lo, hi, size=(n_bad, cfg.k_true))
        means.append(mu)
        inconsistent.append(bad)
        shuffles.append(rng.permutation(cfg.n_users))

    densities = (cfg.target_density, *cfg.source_densities)
    matrices = []
    for d, (n_items, density) in enumerate(zip(sizes, densities)):
        p_user = np.clip(density * activity, 0.0, 1.0)
        mask = rng.random((cfg.n_users, n_items)) < p_user[:, None]
        u_idx, i_idx = np.nonzero(mask)
        draws = rng.random(u_idx.size)
        topics = _draw_topics(user_topics[u_idx], draws)
        if d > 0 and inconsistent[d - 1].size:
            is_bad = np.zeros(n_items, dtype=bool)
            is_bad[inconsistent[d - 1]] = True
            sel = is_bad[i_idx]
            if sel.any():
                other = shuffles[d - 1][u_idx[sel]]
                topics[sel] = _draw_topics(user_topics[other], draws[sel])
        noise = rng.normal(0.0, cfg.noise_sigma, size=u_idx.size)
        values = np.clip(means[d][i_idx, topics] + noise, lo, hi)

        prefix = "i" if d == 0 else f"s{d}_i"
        matrices.append(RatingsMatrix(
            cfg.n_users, n_items, u_idx, i_idx, values,
            user_ids=[f"u{j}" for j in range(cfg.n_users)],
            item_ids=[f"{prefix}{j}" for j in range(n_items)],
            rating_bounds=cfg.rating_bounds))

    collection = AlignedCollection(matrices[0], tuple(matrices[1:]),
                                   "shared-users", cfg.n_users)
    truth = GroundTruth(user_topics, tuple(means), tuple(inconsistent),
                        tuple(shuffles), activity)
    return collection, truth


def write_dataset(collection, truth, cfg, outdir):
    """Write ratings files plus the ground-truth sidecar; returns paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = [os.path.join(outdir, "target.csv")]
    write_ratings(collection.target, paths[0])
    for s, source in enumerate(collection.sources, start=1):
        path = os.path.join(outdir, f"source_{s}.csv")
        write_ratings(source, path)
        paths.append(path)

    sidecar = {
        "config": asdict(cfg),
        "user_topics": truth.user_topics.tolist(),
        "item_means": [m.tolist() for m in truth.item_means],
        "inconsistent_items": [
            [collection.sources[s].item_ids[i] for i in bad]
            for s, bad in enumerate(truth.inconsistent_items)
        ],
        "activity_multipliers": truth.activity_multipliers.tolist(),
    }
    sidecar_path = os.path.join(outdir, "ground_truth.json")
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return paths, sidecar_path
