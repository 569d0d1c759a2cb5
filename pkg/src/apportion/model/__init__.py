"""Spike-and-slab regression with AR(1) errors and its Gibbs sampler."""

from .ar import LagSums, ar_correlation, ar_logdet, block_lengths, whitened_quadratics
from .conditionals import (NumericalUnderflow, log_inv_gamma, log_target_nu, log_target_r,
                           mh_update_nu, mh_update_r, sigma2_posterior, slab_log_odds,
                           tau2_posterior, theta_posterior,
                           truncated_normal_draw, update_beta_z, update_sigma2, update_tau2,
                           update_theta)
from .sampler import (KG_HR_PER_G_S, EmptyDraws, PointEstimate, PosteriorDraws, credible_interval,
                      point_estimate, run_gibbs)
from .state import Hyperparams, ModelState, Quadratics, SamplerConfig, WindowData, initial_state

__all__ = [
    "LagSums", "ar_correlation", "ar_logdet", "block_lengths", "whitened_quadratics",
    "NumericalUnderflow", "log_inv_gamma", "log_target_nu", "log_target_r", "mh_update_nu",
    "mh_update_r", "sigma2_posterior", "tau2_posterior", "theta_posterior", "slab_log_odds", "truncated_normal_draw", "update_beta_z",
    "update_sigma2", "update_tau2", "update_theta", "KG_HR_PER_G_S", "EmptyDraws",
    "PointEstimate", "PosteriorDraws", "credible_interval", "point_estimate", "run_gibbs",
    "Hyperparams", "ModelState", "Quadratics", "SamplerConfig", "WindowData", "initial_state",
]
