"""Boosting over weighted transfer weak learners with item/domain selection.

Each round fits the multi-domain EM model under the current per-item
weights, classifies every item column as within-tolerance or mispredicted
against a per-item mean-absolute-error threshold, and turns that split
into (a) a committee weight for the round's model, minimizing an
exponential loss with an optional variance penalty, and (b) multiplicative
weight updates that emphasize mispredicted target items and damp
mispredicted source items. A per-source fitness weight, measured as the
weighted training-error gain over the no-transfer baseline, additionally
rescales how much of the likelihood each source receives in later rounds.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .data import AlignedCollection, single_domain
from .gplsa import (EmConfig, as_index_pairs, domain_entries, fit_tgplsa,
                    model_from_dict, model_to_dict)

logger = logging.getLogger(__name__)

ENSEMBLE_FORMAT = "stlcf-ensemble"
ENSEMBLE_VERSION = 1


@dataclass(frozen=True)
class BoostConfig:
    """Knobs for the boosting loop.

    ``tau`` is the per-item mean absolute error tolerance (rating units);
    ``gamma`` weighs the variance penalty (0 recovers plain
    empirical-error boosting); ``beta_refresh_every`` spaces out the
    costly per-source fitness re-fits.
    """

    n_rounds: int = 40
    tau: float = 0.03
    gamma: float = 0.5
    em: EmConfig = EmConfig()
    beta_refresh_every: int = 1
    alpha_max: float = 2.0

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.beta_refresh_every < 1:
            raise ValueError("beta_refresh_every must be >= 1")
        if self.alpha_max <= 0:
            raise ValueError("alpha_max must be positive")


@dataclass(frozen=True)
class WeightState:
    """Per-item instance weights, one vector per domain (target + sources)."""

    target: np.ndarray
    sources: tuple

    @classmethod
    def uniform(cls, n_target, n_sources_items):
        return cls(np.full(n_target, 1.0 / n_target),
                   tuple(np.full(n, 1.0 / n) for n in n_sources_items))

    def vectors(self):
        return [self.target, *self.sources]


@dataclass
class RoundRecord:
    """Everything one boosting round decided."""

    round_index: int
    alpha: float
    betas: tuple
    target_indicators: np.ndarray
    source_indicators: tuple
    train_rmse: float
    kept: bool

    @property
    def mispredicted(self):
        return np.where(self.target_indicators == 1)[0]

    @property
    def within_tolerance(self):
        return np.where(self.target_indicators == -1)[0]


def item_indicator(true_col, pred_col, tau):
    """-1 if the column's total absolute error is within tau per rating,
    +1 otherwise (the boundary counts as within)."""
    true_col = np.asarray(true_col, float)
    pred_col = np.asarray(pred_col, float)
    if true_col.size == 0:
        raise ValueError("indicator undefined for an unrated item")
    if true_col.shape != pred_col.shape:
        raise ValueError("column vectors must align")
    return -1 if np.abs(pred_col - true_col).sum() <= tau * true_col.size else 1


def exp_item_loss(indicator):
    """Exponential per-item loss: e for mispredicted, 1/e for tolerated."""
    if indicator not in (-1, 1):
        raise ValueError("indicator must be -1 or +1")
    return math.exp(indicator)


def variance_penalized_loss(l2_values, gamma):
    """Sum of per-item losses plus gamma times the spread of those losses,
    measured as sqrt of the summed squared pairwise differences."""
    values = np.asarray(l2_values, float)
    if values.size == 0:
        raise ValueError("need at least one item loss")
    n = values.size
    # sum_{i>j} (x_i - x_j)^2 = n * sum x^2 - (sum x)^2
    pairwise = n * (values ** 2).sum() - values.sum() ** 2
    return float(values.sum() + gamma * np.sqrt(max(pairwise, 0.0)))


def _alpha_side(weights, idx, gamma, n_items):
    w = weights[idx]
    return (1.0 - gamma) * w.sum() ** 2 + gamma * n_items * (w ** 2).sum()


def raw_alpha(weights, mispredicted, within_tolerance, gamma, n_items):
    """Unclamped minimizer of the variance-penalized exponential loss.

    Grows with the weight mass on within-tolerance items; +/-inf when one
    side is empty.
    """
    weights = np.asarray(weights, float)
    mispredicted = np.asarray(mispredicted, dtype=np.int64)
    within_tolerance = np.asarray(within_tolerance, dtype=np.int64)
    if mispredicted.size == 0 and within_tolerance.size == 0:
        raise ValueError("no evaluated items: both index sets are empty")
    num = _alpha_side(weights, within_tolerance, gamma, n_items)
    den = _alpha_side(weights, mispredicted, gamma, n_items)
    if num == 0.0:
        return float("-inf")
    if den == 0.0:
        return float("inf")
    return 0.25 * math.log(num / den)


def compute_alpha(weights, mispredicted, within_tolerance, gamma, n_items,
                  alpha_max=2.0):
    """Committee weight for one round, clamped to [0, alpha_max]."""
    a = raw_alpha(weights, mispredicted, within_tolerance, gamma, n_items)
    return float(min(max(a, 0.0), alpha_max))


def adaboost_alpha(weights, mispredicted, within_tolerance):
    """The gamma=0 special case, unclamped: half the log mass ratio."""
    weights = np.asarray(weights, float)
    s_in = weights[np.asarray(within_tolerance, dtype=np.int64)].sum()
    s_out = weights[np.asarray(mispredicted, dtype=np.int64)].sum()
    if s_in == 0.0 and s_out == 0.0:
        raise ValueError("no evaluated items: both index sets are empty")
    if s_in == 0.0:
        return float("-inf")
    if s_out == 0.0:
        return float("inf")
    return 0.5 * math.log(s_in / s_out)


def compute_beta(target_weights, item_errors, baseline_item_errors):
    """Per-source fitness: weighted mean error gain over the no-transfer
    baseline. Negative when the transfer model beats the baseline."""
    w = np.asarray(target_weights, float)
    eps = np.asarray(item_errors, float)
    base = np.asarray(baseline_item_errors, float)
    if not (w.shape == eps.shape == base.shape):
        raise ValueError("weight and error vectors must align")
    norm = np.abs(w).sum()
    if norm == 0.0:
        raise ValueError("target weights sum to zero")
    return float((w * (eps - base)).sum() / norm)


def update_target_weights(state, indicators, alpha):
    """Emphasize mispredicted target items: w *= e^(alpha * G), renormalize.

    Items without an indicator (G = 0) keep their weight and still take
    part in the normalization.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    factors = np.exp(alpha * np.asarray(indicators, float))
    new = state.target * factors
    return WeightState(new / new.sum(), state.sources)


def update_source_weights(state, source_index, indicators, alpha, beta):
    """Damp mispredicted source items: w *= e^(-alpha * G - beta), renormalize.

    Items without an indicator keep their weight unchanged.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    indicators = np.asarray(indicators, float)
    factors = np.where(indicators != 0.0,
                       np.exp(-alpha * indicators - beta), 1.0)
    new = list(state.sources)
    updated = new[source_index] * factors
    new[source_index] = updated / updated.sum()
    return WeightState(state.target, tuple(new))


def _item_error_stats(model, ent, domain):
    """Per-item (total absolute training error, rating count)."""
    preds = model.predict(ent.rows, ent.cols, domain)
    sums = np.bincount(ent.cols, weights=np.abs(preds - ent.vals),
                       minlength=ent.n_cols)
    counts = np.bincount(ent.cols, minlength=ent.n_cols)
    return sums, counts


def item_indicators(model, ent, domain, tau):
    """Vector of {-1, +1} indicators over a domain's items; 0 marks items
    with no training ratings."""
    sums, counts = _item_error_stats(model, ent, domain)
    out = np.zeros(ent.n_cols, dtype=np.int8)
    rated = counts > 0
    within = sums <= tau * counts
    out[rated & within] = -1
    out[rated & ~within] = 1
    return out


def item_mean_abs_errors(model, ent, domain):
    """Per-item mean absolute training error; NaN for unrated items."""
    sums, counts = _item_error_stats(model, ent, domain)
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


@dataclass
class Ensemble:
    """Committee of weak learners with positive weights.

    ``rounds`` maps each member back to the boosting round that produced
    it, so predictions can be replayed at any committee prefix.
    """

    learners: tuple
    alphas: np.ndarray
    rounds: tuple
    baseline_item_errors: np.ndarray
    rating_bounds: tuple
    records: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        if len(self.learners) == 0:
            raise ValueError("ensemble must have at least one member")
        if len(self.learners) != len(self.alphas):
            raise ValueError("one alpha per learner required")
        if np.any(np.asarray(self.alphas) <= 0):
            raise ValueError("all committee weights must be positive")

    def predict(self, users, items, max_round=None):
        """Alpha-weighted committee mean, clamped to the rating bounds.

        ``max_round`` restricts the committee to members from rounds
        <= max_round (for convergence studies).
        """
        keep = list(range(len(self.learners)))
        if max_round is not None:
            keep = [j for j in keep if self.rounds[j] <= max_round]
            if not keep:
                raise ValueError(f"no committee members at round <= {max_round}")
        shares = np.asarray([self.alphas[j] for j in keep])
        shares = shares / shares.sum()  # a lone member gets share exactly 1.0
        acc = None
        for share, j in zip(shares, keep):
            part = share * self.learners[j].predict(users, items)
            acc = part if acc is None else acc + part
        lo, hi = self.rating_bounds
        return np.clip(acc, lo, hi)

    def staged_predict(self, users, items):
        """Yield (round_index, predictions) for each committee prefix,
        using the same normalized combination as :meth:`predict`."""
        lo, hi = self.rating_bounds
        member_preds = [m.predict(users, items) for m in self.learners]
        for j in range(len(self.learners)):
            shares = self.alphas[: j + 1] / self.alphas[: j + 1].sum()
            acc = sum(s * p for s, p in zip(shares, member_preds[: j + 1]))
            yield self.rounds[j], np.clip(acc, lo, hi)


def ensemble_predict(ensemble, users, items):
    """Functional form of :meth:`Ensemble.predict`."""
    return ensemble.predict(users, items)


def _source_lambda_shares(lam, betas):
    """Split the source likelihood share in proportion to e^(-beta)."""
    rel = np.exp(-np.asarray(betas, float))
    return tuple(float(x) for x in lam * rel / rel.sum())


def run_stlcf(data, cfg):
    """Run the full selective-transfer boosting loop.

    Returns ``(ensemble, records)``. Rounds whose committee weight clamps
    to zero are recorded but dropped from the committee; if every round
    drops, a RuntimeError with the per-round diagnostics is raised.
    """
    if not isinstance(data, AlignedCollection):
        data = single_domain(data)
    if data.target.nnz == 0:
        raise ValueError("target domain has no observations")
    entries = domain_entries(data)
    n_sources = data.n_sources
    n_target_items = entries[0].n_cols

    seeds = np.random.SeedSequence(cfg.em.seed).generate_state(
        1 + cfg.n_rounds * (1 + n_sources))

    def seed_for(round_index, slot):
        return int(seeds[1 + (round_index - 1) * (1 + n_sources) + slot])

    # no-transfer reference errors, fixed for the whole run
    target_view = data.shared_rows()[0]
    baseline_cfg = replace(cfg.em, lam=0.0, source_lambdas=None,
                           seed=int(seeds[0]))
    baseline_model, _ = fit_tgplsa(single_domain(target_view), None,
                                   baseline_cfg)
    baseline_errors = item_mean_abs_errors(baseline_model, entries[0], 0)
    rated = ~np.isnan(baseline_errors)

    weights = WeightState.uniform(n_target_items,
                                  [ent.n_cols for ent in entries[1:]])
    betas = np.zeros(n_sources)
    records = []
    members = []

    for t in range(1, cfg.n_rounds + 1):
        src_lams = _source_lambda_shares(cfg.em.lam, betas) if n_sources else None
        em_cfg = replace(cfg.em, source_lambdas=src_lams,
                         seed=seed_for(t, 0))
        model, _ = fit_tgplsa(data, weights.vectors(), em_cfg)

        target_g = item_indicators(model, entries[0], 0, cfg.tau)
        source_gs = tuple(item_indicators(model, entries[l + 1], l + 1, cfg.tau)
                          for l in range(n_sources))

        if n_sources and (t - 1) % cfg.beta_refresh_every == 0:
            for s in range(n_sources):
                sub = AlignedCollection(data.target, (data.sources[s],),
                                        data.orientation,
                                        data.shared_axis_size)
                sub_cfg = replace(cfg.em, source_lambdas=(cfg.em.lam,),
                                  seed=seed_for(t, 1 + s))
                sub_model, _ = fit_tgplsa(
                    sub, [weights.target, weights.sources[s]], sub_cfg)
                errors = item_mean_abs_errors(sub_model, entries[0], 0)
                betas[s] = compute_beta(weights.target[rated],
                                        errors[rated],
                                        baseline_errors[rated])

        alpha = compute_alpha(weights.target, np.where(target_g == 1)[0],
                              np.where(target_g == -1)[0], cfg.gamma,
                              n_target_items, cfg.alpha_max)

        for s in range(n_sources):
            weights = update_source_weights(weights, s, source_gs[s], alpha,
                                            betas[s])
        weights = update_target_weights(weights, target_g, alpha)

        preds = model.predict(entries[0].rows, entries[0].cols, 0)
        train_rmse = float(np.sqrt(np.mean((preds - entries[0].vals) ** 2)))
        kept = alpha > 0.0
        records.append(RoundRecord(t, alpha, tuple(float(b) for b in betas),
                                   target_g, source_gs, train_rmse, kept))
        logger.debug("round %d: alpha=%.4f betas=%s train_rmse=%.4f",
                     t, alpha, betas, train_rmse)
        if kept:
            members.append((t, alpha, model))

    if not members:
        detail = ", ".join(f"round {r.round_index}: "
                           f"|I|={r.mispredicted.size} "
                           f"|J|={r.within_tolerance.size}" for r in records)
        raise RuntimeError(f"no useful weak learner (every alpha clamped to "
                           f"zero; {detail})")

    ensemble = Ensemble(
        learners=tuple(m for _, _, m in members),
        alphas=np.array([a for _, a, _ in members]),
        rounds=tuple(t for t, _, _ in members),
        baseline_item_errors=baseline_errors,
        rating_bounds=data.target.rating_bounds,
        records=records)
    return ensemble, records


def _nan_to_none(values):
    return [None if np.isnan(v) else float(v) for v in np.asarray(values)]


def _none_to_nan(values):
    return np.array([np.nan if v is None else float(v) for v in values])


def ensemble_to_dict(ensemble, meta=None):
    return {
        "format": ENSEMBLE_FORMAT,
        "version": ENSEMBLE_VERSION,
        "members": [model_to_dict(m) for m in ensemble.learners],
        "alphas": np.asarray(ensemble.alphas).tolist(),
        "rounds": list(ensemble.rounds),
        "baseline_item_errors": _nan_to_none(ensemble.baseline_item_errors),
        "rating_bounds": list(ensemble.rating_bounds),
        "records": [
            {
                "round": r.round_index,
                "alpha": r.alpha,
                "betas": list(r.betas),
                "train_rmse": r.train_rmse,
                "kept": r.kept,
                "target_indicators": r.target_indicators.tolist(),
                "source_indicators": [g.tolist() for g in r.source_indicators],
            }
            for r in ensemble.records
        ],
        "meta": meta or {},
    }


def ensemble_from_dict(doc):
    if doc.get("format") != ENSEMBLE_FORMAT:
        raise ValueError("not an ensemble document")
    if doc.get("version") != ENSEMBLE_VERSION:
        raise ValueError(f"unsupported ensemble version {doc.get('version')!r}")
    learners = tuple(model_from_dict(d)[0] for d in doc["members"])
    records = [
        RoundRecord(r["round"], r["alpha"], tuple(r["betas"]),
                    np.asarray(r["target_indicators"], dtype=np.int8),
                    tuple(np.asarray(g, dtype=np.int8)
                          for g in r["source_indicators"]),
                    r["train_rmse"], r["kept"])
        for r in doc.get("records", [])
    ]
    ensemble = Ensemble(learners, np.asarray(doc["alphas"], float),
                        tuple(doc["rounds"]),
                        _none_to_nan(doc["baseline_item_errors"]),
                        tuple(doc["rating_bounds"]), records)
    return ensemble, doc.get("meta", {})


def save_ensemble(path, ensemble, meta=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ensemble_to_dict(ensemble, meta), fh, sort_keys=True,
                  separators=(",", ":"))
        fh.write("\n")


def load_ensemble(path):
    with open(path, "r", encoding="utf-8") as fh:
        return ensemble_from_dict(json.load(fh))


class STLCF(BaseEstimator):
    """Selective transfer recommender: boosted committee of weighted
    multi-domain EM models.

    ``gamma=0`` boosts on empirical error alone; ``gamma>0`` adds the
    error-variance penalty. All other EM knobs mirror :class:`TGPLSA`.

    Attributes
    ----------
    ensemble_ : Ensemble
    round_records_ : list of RoundRecord, one per boosting round.
    alphas_ : committee weights of the kept rounds.
    """

    def __init__(self, n_rounds=40, tau=0.03, gamma=0.5, k=50, lam=0.5,
                 beta_refresh_every=1, alpha_max=2.0, max_iters=100,
                 rel_tol=1e-4, sigma_floor=0.05, seed=0, validate=False):
        self.n_rounds = n_rounds
        self.tau = tau
        self.gamma = gamma
        self.k = k
        self.lam = lam
        self.beta_refresh_every = beta_refresh_every
        self.alpha_max = alpha_max
        self.max_iters = max_iters
        self.rel_tol = rel_tol
        self.sigma_floor = sigma_floor
        self.seed = seed
        self.validate = validate

    def _boost_config(self):
        em = EmConfig(k=self.k, lam=self.lam, max_iters=self.max_iters,
                      rel_tol=self.rel_tol, sigma_floor=self.sigma_floor,
                      seed=self.seed, validate=self.validate)
        return BoostConfig(n_rounds=self.n_rounds, tau=self.tau,
                           gamma=self.gamma, em=em,
                           beta_refresh_every=self.beta_refresh_every,
                           alpha_max=self.alpha_max)

    def fit(self, X, y=None):
        if not isinstance(X, AlignedCollection):
            X = single_domain(X)
        self.ensemble_, self.round_records_ = run_stlcf(X, self._boost_config())
        self.alphas_ = self.ensemble_.alphas
        self.flip_pairs_ = X.orientation != "shared-users"
        return self

    def _split_pairs(self, pairs):
        pairs = as_index_pairs(pairs)
        if getattr(self, "flip_pairs_", False):
            return pairs[:, 1], pairs[:, 0]
        return pairs[:, 0], pairs[:, 1]

    def predict(self, pairs, max_round=None):
        users, items = self._split_pairs(pairs)
        return self.ensemble_.predict(users, items, max_round=max_round)

    def staged_predict(self, pairs):
        users, items = self._split_pairs(pairs)
        yield from self.ensemble_.staged_predict(users, items)
