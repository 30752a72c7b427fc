"""Latent-variable data-augmentation baseline.

Gibbs sweeps over the n x J latent uniform matrix, one margin at a
time, each entry redrawn from its conditional copula distribution
truncated to the observation's rectangle slice, followed by one MH
update of the copula parameter given the latents.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import copulas as cp
from . import qmc
from .errors import ConfigError
from .marginals import DatasetBounds
from .samplers import (ChainResult, GarthwaiteScaler, PMConfig, ProposalState,
                       accept_probability, propose_theta)

DEGENERATE_SLICE = 1e-14


@dataclass(frozen=True)
class DAConfig:
    iterations: int = 15000
    burn_in: int = 5000
    thinning: int = 1
    garthwaite: bool = True

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise ConfigError("burn-in must be smaller than iterations")


def da_margin_update(u, j, model, a_col, b_col, rng):
    """Redraw column j of the latent matrix from its truncated
    conditional; rows with a numerically degenerate slice keep their
    current value."""
    n, J = u.shape
    rest = np.delete(u, j, axis=1)
    A = cp.conditional_cdf(model, j, a_col, rest)
    B = cp.conditional_cdf(model, j, b_col, rest)
    ok = (B - A) > DEGENERATE_SLICE
    if not np.all(ok):
        warnings.warn(f"{int((~ok).sum())} degenerate conditional slices "
                      f"kept their current latent value")
    w = A + (B - A) * rng.random(n)
    new_col = u[:, j].copy()
    if np.any(ok):
        drawn = cp.conditional_inverse(model, j, w[ok], rest[ok])
        # containment is the invariant; clip away bisection round-off
        drawn = np.clip(drawn, a_col[ok],
                        np.nextafter(b_col[ok], -np.inf))
        new_col[ok] = drawn
    out = u.copy()
    out[:, j] = new_col
    return out


def da_theta_update(u, spec, prior_logpdf, transform, eta, log_post, pstate,
                    rng, scale=1.0):
    """One MH step targeting p(theta | u) prop prod c(u_i; theta) p(theta)."""
    eta_new = propose_theta(eta, pstate, rng, scale=scale)
    theta_new = transform.inverse(eta_new)
    lp_new = float(prior_logpdf(theta_new)) + transform.log_jacobian(eta_new)
    if lp_new == -math.inf:
        return eta, log_post, False
    model_new = spec.to_model(theta_new)
    ll_new = float(np.sum(cp.log_density(model_new, u)))
    alpha = accept_probability(log_post, 0.0, ll_new + lp_new, 0.0)
    if rng.random() < alpha:
        return eta_new, ll_new + lp_new, True
    return eta, log_post, False


def da_run(bounds: DatasetBounds, spec, prior_logpdf, transform,
           config: DAConfig, seed, theta0) -> ChainResult:
    """Full Gibbs baseline: all J margin updates then one theta update
    per sweep; emits the same chain container as the PM samplers."""
    if not bool(np.all(bounds.discrete)):
        raise ConfigError("the data-augmentation baseline supports discrete "
                          "margins only")
    if bounds.J > 25:
        warnings.warn("data augmentation above J = 25 is very expensive")
    rng = np.random.Generator(np.random.Philox(key=qmc.fold_seed(seed, 7)))
    n, J = bounds.n, bounds.J
    a, b = bounds.a, bounds.b

    u = a + (b - a) * rng.random((n, J))
    theta = np.atleast_1d(np.asarray(theta0, dtype=float))
    eta = transform.forward(theta)
    model = spec.to_model(theta)
    log_post = (float(np.sum(cp.log_density(model, u)))
                + float(prior_logpdf(theta)) + transform.log_jacobian(eta))

    pstate = ProposalState(len(eta))
    pstate.update(eta)
    scaler = GarthwaiteScaler() if config.garthwaite else None

    thetas = np.empty((config.iterations, len(eta)))
    log_likes = np.empty(config.iterations)
    accepts = np.zeros(config.iterations, dtype=bool)

    t_start = time.perf_counter()
    for it in range(config.iterations):
        model = spec.to_model(transform.inverse(eta))
        for j in range(J):
            u = da_margin_update(u, j, model, a[:, j], b[:, j], rng)
        log_post = (float(np.sum(cp.log_density(model, u)))
                    + float(prior_logpdf(transform.inverse(eta)))
                    + transform.log_jacobian(eta))
        scale = scaler.scale if scaler else 1.0
        eta, log_post, acc = da_theta_update(
            u, spec, prior_logpdf, transform, eta, log_post, pstate, rng,
            scale=scale)
        theta = transform.inverse(eta)
        thetas[it] = theta
        log_likes[it] = log_post
        accepts[it] = acc
        if scaler:
            scaler.update(acc)
        pstate.update(eta)
    seconds = time.perf_counter() - t_start

    pm_echo = PMConfig("standard", stream="mc", M=1,
                       iterations=config.iterations, burn_in=config.burn_in,
                       thinning=config.thinning)
    return ChainResult(thetas, log_likes, accepts, pm_echo, seed, seconds,
                       burn_in=config.burn_in, thinning=config.thinning)
