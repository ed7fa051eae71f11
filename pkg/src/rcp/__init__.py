"""Retrospective counterfactual prediction under an assumed cross-world correlation."""

from rcp.data import Dataset, SplitPlan, Unit, load_csv, split, write_csv
from rcp.forest import ForestParams, fit_mean, fit_quantile, predict_mean, predict_quantile
from rcp.conformal import FittedArm, WidthForm, calibrate, fit_arms, predict_interval, to_width_form
from rcp.core import (
    CounterfactualPrediction,
    GaussianOracle,
    PipelineParams,
    RetrospectivePredictor,
    RhoSpec,
    bootstrap_ci,
    c_rho,
    c_rho_plus_ci,
    lambda_ratio,
    mu_rho,
    oracle_interval,
    oracle_mu,
)
from rcp.baselines import cate_adjusted_predict, do_predict, matching_predict
from rcp.harness import ExperimentConfig, run_experiment

__all__ = [
    "Dataset",
    "SplitPlan",
    "Unit",
    "load_csv",
    "split",
    "write_csv",
    "ForestParams",
    "fit_mean",
    "fit_quantile",
    "predict_mean",
    "predict_quantile",
    "FittedArm",
    "WidthForm",
    "calibrate",
    "fit_arms",
    "predict_interval",
    "to_width_form",
    "CounterfactualPrediction",
    "GaussianOracle",
    "PipelineParams",
    "RetrospectivePredictor",
    "RhoSpec",
    "bootstrap_ci",
    "c_rho",
    "c_rho_plus_ci",
    "lambda_ratio",
    "mu_rho",
    "oracle_interval",
    "oracle_mu",
    "do_predict",
    "cate_adjusted_predict",
    "matching_predict",
    "ExperimentConfig",
    "run_experiment",
]
