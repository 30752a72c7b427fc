"""Shared fixtures and oracles for the test suite."""

from itertools import product

import numpy as np
import pytest

from pmcopula import copulas as cp
from pmcopula import likelihood as lk
from pmcopula import marginals as mg


def corner_value(model, a, b):
    """Exact rectangle probability by 2^J inclusion-exclusion over the
    copula CDF (Gaussian corners via scipy's MVN CDF)."""
    J = len(a)
    total = 0.0
    for v in product((0, 1), repeat=J):
        corner = np.where(np.array(v) == 1, b, a)
        sign = (-1) ** (J - sum(v))
        if isinstance(model, cp.GaussianFactorParam):
            total += sign * _gaussian_cdf(model, corner)
        else:
            total += sign * float(cp.cdf(model, corner))
    return total


def _gaussian_cdf(model, corner):
    from scipy.special import ndtri
    from scipy.stats import multivariate_normal

    if np.any(corner <= 0):
        return 0.0
    sigma, _ = cp.gaussian_sigma(model)
    sd = np.sqrt(np.diag(sigma))
    z = ndtri(np.minimum(corner, 1 - 1e-16)) * sd
    return float(multivariate_normal(cov=sigma).cdf(z))


def bernoulli_dataset(model, J, n, seed, p=0.5):
    """Binary dataset drawn exactly from the copula with Bernoulli(p)
    margins, plus its bounds under the true margins."""
    U = cp.sample_copula(model, n, seed=seed, J=J)
    X = (U > 1.0 - p).astype(float)
    margins = [mg.BernoulliMargin(p)] * J
    return X, mg.build_dataset_bounds(X, margins)


@pytest.fixture(scope="session")
def clayton_testbed():
    """The J=10, n=1000, theta=1 Clayton testbed used across criteria."""
    model = cp.ClaytonParam(1.0)
    X, bounds = bernoulli_dataset(model, J=10, n=1000, seed=20260808)
    spec = lk.ModelSpec("clayton", 10)
    prior = cp.InverseGammaPrior(2.2, 1.1)
    return {
        "X": X,
        "bounds": bounds,
        "spec": spec,
        "prior_logpdf": lambda th: float(prior.log_pdf(th[0])),
        "engine": lambda M, stream="rqmc": lk.CopulaLikelihood(
            spec, bounds, lk.EstimatorConfig(stream, M)),
    }
