"""Selective transfer learning for cross-domain collaborative filtering."""

from .boosting import (STLCF, BoostConfig, Ensemble, RoundRecord, WeightState,
                       adaboost_alpha, compute_alpha, compute_beta,
                       ensemble_predict, exp_item_loss, item_indicator,
                       load_ensemble, run_stlcf, save_ensemble,
                       update_source_weights, update_target_weights,
                       variance_penalized_loss)
from .data import (SHARED_ITEMS, SHARED_USERS, AlignedCollection,
                   DuplicateRatingError, HoldoutSplit, RatingRangeError,
                   RatingsMatrix, RatingsParseError, align_domains,
                   load_ratings, parse_ratings, single_domain, split_holdout,
                   write_ratings, write_split)
from .evaluation import (ExperimentConfig, MethodSpec, MetricsReport,
                         long_tail_report, mae, rmse, run_experiment,
                         save_report, sweep)
from .gplsa import (GPLSA, TGPLSA, EmConfig, LatentModel, e_step, fit_gplsa,
                    fit_tgplsa, gaussian_density, joint_nll, load_model,
                    m_step_item_gaussians, m_step_user_topics, save_model)
from .synth import GroundTruth, SynthConfig, generate, write_dataset

__version__ = "0.1.0"

__all__ = [
    "AlignedCollection", "BoostConfig", "DuplicateRatingError", "EmConfig",
    "Ensemble", "ExperimentConfig", "GPLSA", "GroundTruth", "HoldoutSplit",
    "LatentModel", "MethodSpec", "MetricsReport", "RatingRangeError",
    "RatingsMatrix", "RatingsParseError", "RoundRecord", "SHARED_ITEMS",
    "SHARED_USERS", "STLCF", "SynthConfig", "TGPLSA", "WeightState",
    "adaboost_alpha", "align_domains", "compute_alpha", "compute_beta",
    "e_step", "ensemble_predict", "exp_item_loss", "fit_gplsa", "fit_tgplsa",
    "gaussian_density", "generate", "item_indicator", "joint_nll",
    "load_ensemble", "load_model", "load_ratings", "long_tail_report", "mae",
    "m_step_item_gaussians", "m_step_user_topics", "parse_ratings", "rmse",
    "run_experiment", "run_stlcf", "save_ensemble", "save_model",
    "save_report", "single_domain", "split_holdout", "sweep",
    "update_source_weights", "update_target_weights",
    "variance_penalized_loss", "write_dataset", "write_ratings",
    "write_split",
]
