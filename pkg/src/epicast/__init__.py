"""Forecasting toolkit for panels of overdispersed daily count time series.

A state-space hierarchical negative-binomial model with a time-varying
autoregressive coefficient, fitted by Metropolis-within-Gibbs MCMC, with
posterior-predictive forecasting, holdout validation (concordance
correlation), and DTW/Ward clustering of latent trajectories.
"""

__version__ = "0.1.0"
