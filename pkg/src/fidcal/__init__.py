"""Fiducial inference for interlaboratory calibration with two error components."""

__version__ = "0.1.0"

from .calibrate import (
    IntervalEstimate,
    assess_exceedance,
    bootstrap_ci_concentration,
    run_calibration,
    detection_limit,
    mle_concentration,
    moment_fit,
    quantification_limit,
    wald_ci_concentration,
)
from .estimation import FitResult, fit_mle, fit_mme, loglik, mme_sigma_eta, mme_zero_level
from .fiducial import (
    FiducialDraw,
    FiducialDraws,
    FiducialSample,
    concentration_pivots,
    draw_parameter_fiducials,
    fiducial_mode,
    hdi,
)
from .model import (
    CalibrationQuery,
    Design,
    InterlabDataset,
    ModelParams,
    QueryDesign,
    calibration_band,
    response_moments,
    simulate_dataset,
    simulate_query,
)
from .simharness import MetricsTable, Scenario, get_preset, point_metrics, run_scenario

__all__ = [
    "CalibrationQuery", "Design", "FiducialDraw", "FiducialDraws", "FiducialSample", "FitResult",
    "InterlabDataset", "IntervalEstimate", "MetricsTable", "ModelParams", "QueryDesign", "Scenario",
    "assess_exceedance", "bootstrap_ci_concentration", "run_calibration", "calibration_band",
    "concentration_pivots", "detection_limit", "draw_parameter_fiducials", "fiducial_mode", "fit_mle",
    "fit_mme", "get_preset", "hdi", "loglik", "mle_concentration", "mme_sigma_eta", "mme_zero_level",
    "moment_fit", "point_metrics", "quantification_limit", "response_moments", "run_scenario",
    "simulate_dataset", "simulate_query", "wald_ci_concentration",
]
