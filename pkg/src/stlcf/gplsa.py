"""Gaussian latent-topic rating models fitted by EM, single- and multi-domain.

The model for one domain is ``P(r | u, i) = sum_z P(z|u) N(r; mu_iz,
sigma_iz)``. The multi-domain variant ties one user-topic table across the
target and all source domains (the transfer bridge) while every domain
keeps its own per-item Gaussians; a tradeoff weight splits the likelihood
between target and sources, and per-item instance weights steer how much
each column contributes to the shared table.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator

from .data import (DEFAULT_RATING_BOUNDS, AlignedCollection,
                   check_rating_bounds, single_domain)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

MODEL_FORMAT = "stlcf-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class EmConfig:
    """Hyperparameters for one EM fit.

    ``lam`` is the total likelihood share handed to the sources (0 means
    pure single-domain learning); ``source_lambdas`` splits it per source
    and defaults to an equal split.
    """

    k: int = 50
    lam: float = 0.5
    source_lambdas: tuple = None
    max_iters: int = 100
    rel_tol: float = 1e-4
    sigma_floor: float = 0.05
    seed: int = 0
    validate: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lam must be in [0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")
        if self.source_lambdas is not None:
            sl = tuple(float(x) for x in self.source_lambdas)
            if any(x < 0 for x in sl):
                raise ValueError("source_lambdas must be nonnegative")
            if abs(sum(sl) - self.lam) > 1e-9:
                raise ValueError("source_lambdas must sum to lam")
            object.__setattr__(self, "source_lambdas", sl)

    def domain_lambdas(self, n_sources):
        """Per-domain likelihood weights, target first.

        With no sources the target weight is 1 regardless of ``lam``.
        """
        if n_sources == 0:
            return np.array([1.0])
        if self.source_lambdas is not None:
            if len(self.source_lambdas) != n_sources:
                raise ValueError("source_lambdas length != number of sources")
            src = np.asarray(self.source_lambdas)
        else:
            src = np.full(n_sources, self.lam / n_sources)
        return np.concatenate([[1.0 - self.lam], src])


class _Entries(NamedTuple):
    """One domain's observations with the shared axis on rows."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    n_cols: int

    @property
    def size(self):
        return self.vals.size


def domain_entries(data):
    """Entry arrays for every domain, shared axis on rows, target first."""
    return [
        _Entries(m.users, m.items, m.ratings, m.n_items)
        for m in data.shared_rows()
    ]


@dataclass
class LatentModel:
    """Fitted tied-topic model: one user-topic table, per-domain Gaussians.

    Domain 0 is the target. ``user_topics`` rows are probability vectors
    over the k topics; ``item_means``/``item_sigmas`` hold one (n_items, k)
    table per domain, in rating units.
    """

    user_topics: np.ndarray
    item_means: tuple
    item_sigmas: tuple
    lambdas: tuple
    rating_bounds: tuple = DEFAULT_RATING_BOUNDS
    e_step_fallbacks: int = field(default=0, compare=False)

    @property
    def k(self):
        return self.user_topics.shape[1]

    @property
    def n_domains(self):
        return len(self.item_means)

    @property
    def shared_axis_size(self):
        return self.user_topics.shape[0]

    def predict(self, users, items, domain=0):
        """Expected rating for (shared-axis, item) index pairs, clamped."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        mu = self.item_means[domain]
        if users.size:
            if users.min() < 0 or users.max() >= self.shared_axis_size:
                raise IndexError("user index out of range")
            if items.min() < 0 or items.max() >= mu.shape[0]:
                raise IndexError("item index out of range")
        raw = np.einsum("ek,ek->e", self.user_topics[users], mu[items])
        lo, hi = self.rating_bounds
        return np.clip(raw, lo, hi)

    def predict_one(self, u, i, domain=0):
        return float(self.predict(np.array([u]), np.array([i]), domain)[0])


def gaussian_density(r, mu, sigma):
    """Normal pdf, elementwise."""
    r, mu, sigma = np.asarray(r, float), np.asarray(mu, float), np.asarray(sigma, float)
    z = (r - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * np.sqrt(2.0 * np.pi))


def _log_mixture_terms(user_topics, mu, sigma, ent):
    """log(P(z|u) * N(r; mu_iz, sigma_iz)) per entry and topic."""
    s = sigma[ent.cols]
    z = (ent.vals[:, None] - mu[ent.cols]) / s
    log_pdf = -0.5 * z * z - np.log(s) - 0.5 * LOG_2PI
    with np.errstate(divide="ignore"):
        return np.log(user_topics[ent.rows]) + log_pdf


def _normalize_rows(table, fallback_count=None):
    """Row-normalize, sending all-zero (or non-finite) rows to uniform."""
    k = table.shape[1]
    sums = table.sum(axis=1, keepdims=True)
    bad = ~np.isfinite(sums[:, 0]) | (sums[:, 0] <= 0.0)
    if bad.any():
        table = table.copy()
        table[bad] = 1.0 / k
        sums = np.where(bad[:, None], 1.0, sums)
        if fallback_count is not None:
            fallback_count[0] += int(bad.sum())
    return table / sums


def _posteriors(model, entries):
    out = []
    fallbacks = [0]
    for l, ent in enumerate(entries):
        if ent.size == 0:
            out.append(np.zeros((0, model.k)))
            continue
        logw = _log_mixture_terms(model.user_topics, model.item_means[l],
                                  model.item_sigmas[l], ent)
        shift = logw.max(axis=1, keepdims=True)
        shift = np.where(np.isfinite(shift), shift, 0.0)
        out.append(_normalize_rows(np.exp(logw - shift), fallbacks))
    if fallbacks[0]:
        model.e_step_fallbacks += fallbacks[0]
        logger.debug("e_step: %d entries fell back to uniform posteriors",
                     fallbacks[0])
    return out


def _user_update(posteriors, entries, weights, lambdas, size, k):
    acc = np.zeros((size, k))
    for lam_l, w_l, ent, q in zip(lambdas, weights, entries, posteriors):
        if ent.size == 0 or lam_l == 0.0:
            continue
        w_e = lam_l * w_l[ent.cols]
        for z in range(k):
            acc[:, z] += np.bincount(ent.rows, weights=w_e * q[:, z],
                                     minlength=size)
    return _normalize_rows(acc)


def _gaussian_update(posteriors, entries, sigma_floor, previous):
    new_means, new_sigmas = [], []
    for l, ent in enumerate(entries):
        mu_prev = previous.item_means[l]
        sg_prev = previous.item_sigmas[l]
        n_items, k = mu_prev.shape
        mu_new = mu_prev.copy()
        sg_new = sg_prev.copy()
        if ent.size:
            q = posteriors[l]
            for z in range(k):
                mass = np.bincount(ent.cols, weights=q[:, z], minlength=n_items)
                seen = mass > 0.0
                safe = np.where(seen, mass, 1.0)
                mu_z = np.bincount(ent.cols, weights=ent.vals * q[:, z],
                                   minlength=n_items) / safe
                mu_z = np.where(seen, mu_z, mu_prev[:, z])
                dev = (ent.vals - mu_z[ent.cols]) ** 2
                var_z = np.bincount(ent.cols, weights=dev * q[:, z],
                                    minlength=n_items) / safe
                mu_new[:, z] = mu_z
                sg_new[seen, z] = np.maximum(np.sqrt(var_z[seen]), sigma_floor)
        new_means.append(mu_new)
        new_sigmas.append(sg_new)
    return tuple(new_means), tuple(new_sigmas)


def e_step(model, data):
    """Posterior topic distribution of every observed entry, per domain.

    Every domain reads the same tied user-topic table. Entries whose
    mixture underflows entirely fall back to the uniform vector; the count
    of such rows accumulates on ``model.e_step_fallbacks``.
    """
    return _posteriors(model, domain_entries(data))


def m_step_user_topics(posteriors, data, item_weights, cfg):
    """Re-estimate the tied user-topic table from weighted posteriors.

    Rows are proportional to the lambda- and item-weighted posterior mass
    a user accumulated across all domains; users with no observations get
    the uniform vector.
    """
    entries = domain_entries(data)
    weights = _check_item_weights(entries, item_weights)
    lambdas = cfg.domain_lambdas(data.n_sources)
    k = posteriors[0].shape[1] if posteriors else cfg.k
    return _user_update(posteriors, entries, weights, lambdas,
                        data.shared_axis_size, k)


def m_step_item_gaussians(posteriors, data, cfg, previous):
    """Re-estimate per-domain item Gaussians from posterior-weighted moments.

    (item, topic) cells that saw no posterior mass keep their previous
    parameters; sigmas are floored at ``cfg.sigma_floor``.
    """
    return _gaussian_update(posteriors, domain_entries(data),
                            cfg.sigma_floor, previous)


def _check_item_weights(entries, item_weights):
    if item_weights is None:
        return [np.ones(ent.n_cols) for ent in entries]
    weights = [np.asarray(w, dtype=np.float64) for w in item_weights]
    if len(weights) != len(entries):
        raise ValueError("need one weight vector per domain (target first)")
    for w, ent in zip(weights, entries):
        if w.shape != (ent.n_cols,):
            raise ValueError("weight vector length does not match item count")
        if np.any(w < 0):
            raise ValueError("item weights must be nonnegative")
        if ent.size and w.sum() <= 0:
            raise ValueError("item weights must not be all zero in a rated domain")
    return weights


def _log_mixtures(model, ent, domain):
    logw = _log_mixture_terms(model.user_topics, model.item_means[domain],
                              model.item_sigmas[domain], ent)
    shift = logw.max(axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    return shift[:, 0] + np.log(np.exp(logw - shift).sum(axis=1))


def joint_nll(model, data, item_weights=None, cfg=None):
    """Joint negative log-likelihood with the item weights inside the log.

    This is the reported objective; with unit weights it coincides exactly
    with the quantity the EM iteration decreases (see ``fit_tgplsa``).
    """
    entries = domain_entries(data)
    lambdas = (cfg.domain_lambdas(data.n_sources) if cfg is not None
               else np.asarray(model.lambdas))
    weights = _check_item_weights(entries, item_weights)
    total = 0.0
    for l, ent in enumerate(entries):
        if ent.size == 0:
            continue
        w_e = weights[l][ent.cols]
        if np.any(w_e <= 0):
            raise ValueError("nonpositive weight on an observed item")
        total -= lambdas[l] * (np.log(w_e) + _log_mixtures(model, ent, l)).sum()
    return float(total)


def _em_objective(model, entries, weights, lambdas):
    """The quantity each EM iteration is guaranteed not to increase.

    Identical to ``joint_nll`` when all weights are 1; for nonuniform
    weights the per-entry log-mixture is scaled by its item weight, which
    is the loss the weighted M-step actually optimizes. The additive
    log-weight constant is dropped so the relative stopping rule tracks
    the part the iteration can actually move.
    """
    total = 0.0
    for l, ent in enumerate(entries):
        if ent.size == 0 or lambdas[l] == 0.0:
            continue
        w_e = weights[l][ent.cols]
        lse = _log_mixtures(model, ent, l)
        total -= lambdas[l] * (w_e * lse).sum()
    return float(total)


def _initial_model(data, entries, cfg, lambdas):
    rng = np.random.default_rng(cfg.seed)
    user_topics = _normalize_rows(rng.random((data.shared_axis_size, cfg.k)))
    lo, hi = check_rating_bounds(data.target.rating_bounds)
    means, sigmas = [], []
    for ent in entries:
        if ent.size:
            counts = np.bincount(ent.cols, minlength=ent.n_cols)
            sums = np.bincount(ent.cols, weights=ent.vals, minlength=ent.n_cols)
            base = np.where(counts > 0, sums / np.maximum(counts, 1),
                            ent.vals.mean())
        else:
            base = np.full(ent.n_cols, 0.5 * (lo + hi))
        jitter = rng.normal(0.0, 0.01, size=(ent.n_cols, cfg.k))
        means.append(base[:, None] + jitter)
        sigmas.append(np.ones((ent.n_cols, cfg.k)))
    return LatentModel(user_topics, tuple(means), tuple(sigmas),
                       tuple(float(x) for x in lambdas),
                       data.target.rating_bounds)


def _validate_model(model, posteriors):
    for q in posteriors:
        if q.size:
            np.testing.assert_allclose(q.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(model.user_topics.sum(axis=1), 1.0,
                               rtol=0, atol=1e-9)
    assert np.all(model.user_topics >= 0)
    for sg in model.item_sigmas:
        assert np.all(sg > 0)


def fit_tgplsa(data, item_weights=None, cfg=EmConfig()):
    """Fit the tied-topic multi-domain model by EM.

    Returns ``(model, trace)`` where the trace holds the objective at
    initialization plus after each iteration; it is non-increasing up to
    floating point noise for any nonnegative item weights.
    """
    if not isinstance(data, AlignedCollection):
        data = single_domain(data)
    if data.target.nnz == 0:
        raise ValueError("target domain has no observations")
    entries = domain_entries(data)
    weights = _check_item_weights(entries, item_weights)
    lambdas = cfg.domain_lambdas(data.n_sources)

    model = _initial_model(data, entries, cfg, lambdas)
    trace = [_em_objective(model, entries, weights, lambdas)]
    for _ in range(cfg.max_iters):
        posteriors = _posteriors(model, entries)
        model.user_topics = _user_update(posteriors, entries, weights,
                                         lambdas, data.shared_axis_size, cfg.k)
        model.item_means, model.item_sigmas = _gaussian_update(
            posteriors, entries, cfg.sigma_floor, model)
        if cfg.validate:
            _validate_model(model, posteriors)
        current = _em_objective(model, entries, weights, lambdas)
        previous = trace[-1]
        trace.append(current)
        if (previous - current) / max(abs(previous), 1e-12) < cfg.rel_tol:
            break
    return model, np.asarray(trace)


def fit_gplsa(target, cfg=EmConfig()):
    """Single-domain baseline: no sources, unit item weights."""
    if isinstance(target, AlignedCollection):
        target = target.target
    return fit_tgplsa(single_domain(target), None,
                      replace(cfg, lam=0.0, source_lambdas=None))


def item_mle(matrix):
    """Per-item Gaussian maximum likelihood (mean, population std).

    Independent oracle for the k=1 collapse of the EM fit; items with no
    ratings get NaN.
    """
    counts = np.bincount(matrix.items, minlength=matrix.n_items).astype(float)
    seen = counts > 0
    safe = np.maximum(counts, 1.0)
    mean = np.bincount(matrix.items, weights=matrix.ratings,
                       minlength=matrix.n_items) / safe
    sq = np.bincount(matrix.items, weights=matrix.ratings ** 2,
                     minlength=matrix.n_items) / safe
    var = np.maximum(sq - mean ** 2, 0.0)
    mean[~seen] = np.nan
    std = np.sqrt(var)
    std[~seen] = np.nan
    return mean, std


def model_to_dict(model, nll_trace=None, meta=None):
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "k": model.k,
        "lambdas": [float(x) for x in model.lambdas],
        "rating_bounds": list(model.rating_bounds),
        "user_topics": model.user_topics.tolist(),
        "domains": [
            {"item_means": mu.tolist(), "item_sigmas": sg.tolist()}
            for mu, sg in zip(model.item_means, model.item_sigmas)
        ],
        "nll_trace": [] if nll_trace is None else np.asarray(nll_trace).tolist(),
        "meta": meta or {},
    }


def model_from_dict(doc):
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError("not a model document")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    means = tuple(np.asarray(d["item_means"], float) for d in doc["domains"])
    sigmas = tuple(np.asarray(d["item_sigmas"], float) for d in doc["domains"])
    model = LatentModel(np.asarray(doc["user_topics"], float), means, sigmas,
                        tuple(doc["lambdas"]), tuple(doc["rating_bounds"]))
    return model, np.asarray(doc["nll_trace"]), doc.get("meta", {})


def save_model(path, model, nll_trace=None, meta=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, nll_trace, meta), fh, sort_keys=True,
                  separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def as_index_pairs(pairs):
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("expected an (n, 2) array of (user, item) index pairs")
    return pairs


class GPLSA(BaseEstimator):
    """Single-domain Gaussian latent-topic recommender.

    Parameters
    ----------
    k : int
        Number of latent topics.
    max_iters, rel_tol : EM stopping rule.
    sigma_floor : float
        Lower bound on every Gaussian's standard deviation, in rating units.
    seed : int
        Seeds the random initialization; fits are bit-reproducible.
    validate : bool
        Assert normalization invariants after every EM step.

    Attributes
    ----------
    model_ : LatentModel
    nll_trace_ : ndarray of objective values, non-increasing.
    """

    def __init__(self, k=50, max_iters=100, rel_tol=1e-4, sigma_floor=0.05,
                 seed=0, validate=False):
        self.k = k
        self.max_iters = max_iters
        self.rel_tol = rel_tol
        self.sigma_floor = sigma_floor
        self.seed = seed
        self.validate = validate

    def _em_config(self, lam=0.0, source_lambdas=None):
        return EmConfig(k=self.k, lam=lam, source_lambdas=source_lambdas,
                        max_iters=self.max_iters, rel_tol=self.rel_tol,
                        sigma_floor=self.sigma_floor, seed=self.seed,
                        validate=self.validate)

    def fit(self, X, y=None):
        if isinstance(X, AlignedCollection):
            X = X.target
        self.model_, self.nll_trace_ = fit_gplsa(X, self._em_config())
        self.flip_pairs_ = False
        return self

    def predict(self, pairs):
        """Predicted ratings for (user, item) dense index pairs."""
        pairs = as_index_pairs(pairs)
        if getattr(self, "flip_pairs_", False):
            return self.model_.predict(pairs[:, 1], pairs[:, 0])
        return self.model_.predict(pairs[:, 0], pairs[:, 1])


class TGPLSA(GPLSA):
    """Multi-domain transfer variant of :class:`GPLSA`.

    One tied user-topic table bridges all domains; the likelihood is split
    ``(1 - lam)`` target vs ``lam`` sources. ``fit`` takes an
    AlignedCollection (a bare RatingsMatrix degenerates to single-domain
    learning) and optional per-domain item weights.
    """

    def __init__(self, k=50, lam=0.5, source_lambdas=None, max_iters=100,
                 rel_tol=1e-4, sigma_floor=0.05, seed=0, validate=False):
        super().__init__(k=k, max_iters=max_iters, rel_tol=rel_tol,
                         sigma_floor=sigma_floor, seed=seed, validate=validate)
        self.lam = lam
        self.source_lambdas = source_lambdas

    def fit(self, X, y=None, item_weights=None):
        if not isinstance(X, AlignedCollection):
            X = single_domain(X)
        lam = self.lam if X.n_sources else 0.0
        src = self.source_lambdas if X.n_sources else None
        cfg = self._em_config(lam=lam, source_lambdas=src)
        self.model_, self.nll_trace_ = fit_tgplsa(X, item_weights, cfg)
        self.flip_pairs_ = X.orientation != "shared-users"
        return self
