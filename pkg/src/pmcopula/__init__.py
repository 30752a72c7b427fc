"""Bayesian estimation of high-dimensional copulas with discrete and
mixed margins, via unbiased likelihood estimates inside pseudo-marginal
MCMC, variational Bayes, and a data-augmentation baseline."""

__version__ = "0.1.0"
