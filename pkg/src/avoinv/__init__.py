"""Bayesian AVO inversion with FFT Gaussian priors, spline surrogates and MCMC."""

__version__ = "0.1.0"
