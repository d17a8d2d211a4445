"""Bayesian beta Markov random field calibration of risk-neutral densities."""

from .calibration import CalibratedCurve, calibrate_density, calibrated_pit_cdf, ks_distance
from .market import GbmSpec, LognormalRnd, NumericRnd, build_pit_panel, simulate_gbm, thin_panel
from .mcmc import ChainOutput, SamplerConfig, double_mh_step, geweke_z, run_chain, summarize
from .model import (
    BetaLocalParams,
    HyperParams,
    MaturityGrid,
    NeighborhoodSystem,
    PitPanel,
    ThetaLayout,
    ThetaState,
    Topology,
    compute_mu,
    log_beta_local,
    log_prior,
    pseudo_log_likelihood,
    unnormalized_log_posterior,
)
from .rnd import SmileQuote, SplineFit, extract_rnd, fit_smile_spline, pits_from_surface

__version__ = "0.1.0"

__all__ = [
    "BetaLocalParams",
    "CalibratedCurve",
    "ChainOutput",
    "GbmSpec",
    "HyperParams",
    "LognormalRnd",
    "MaturityGrid",
    "NeighborhoodSystem",
    "NumericRnd",
    "PitPanel",
    "SamplerConfig",
    "SmileQuote",
    "SplineFit",
    "ThetaLayout",
    "ThetaState",
    "Topology",
    "build_pit_panel",
    "calibrate_density",
    "calibrated_pit_cdf",
    "compute_mu",
    "double_mh_step",
    "extract_rnd",
    "fit_smile_spline",
    "geweke_z",
    "ks_distance",
    "log_beta_local",
    "log_prior",
    "pits_from_surface",
    "pseudo_log_likelihood",
    "run_chain",
    "simulate_gbm",
    "summarize",
    "thin_panel",
    "unnormalized_log_posterior",
]
