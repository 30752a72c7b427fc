"""Variational Bayes with an estimated likelihood.

Maximizes the evidence lower bound by stochastic natural-gradient
ascent, with the likelihood inside the bound replaced by an unbiased
estimate. Gradient draws use the score-function identity with a
component-wise control variate; the inverse-gamma family covers the
Archimedean copula parameter and a multivariate normal in natural
parameters covers factor loadings.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, polygamma

from . import qmc
from .errors import ConvergenceError

_digamma = lambda a: polygamma(0, a)
_trigamma = lambda a: polygamma(1, a)


# ---------------------------------------------------------------------------
# inverse-gamma family (Archimedean theta, optionally shifted)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InverseGammaVar:
    """q(theta) = IG(a, b) on theta - shift (shift 1 for Gumbel)."""

    a: float
    b: float
    shift: float = 0.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("inverse-gamma parameters must be positive")

    @property
    def params(self):
        return np.array([self.a, self.b])

    def with_params(self, vec):
        return InverseGammaVar(float(vec[0]), float(vec[1]), self.shift)

    def feasible(self, vec):
        return vec[0] > 1e-8 and vec[1] > 1e-8

    def sample(self, rng, size):
        return self.shift + self.b / rng.gamma(self.a, 1.0, size)

    def log_q(self, theta):
        x = np.asarray(theta, dtype=float) - self.shift
        return (self.a * math.log(self.b) - gammaln(self.a)
                - (self.a + 1.0) * np.log(x) - self.b / x)

    def score(self, theta):
        """d log q / d(a, b) rows per draw."""
        x = np.asarray(theta, dtype=float) - self.shift
        da = -np.log(x) + math.log(self.b) - _digamma(self.a)
        db = -1.0 / x + self.a / self.b
        return np.stack([da, db], axis=-1)

    def fisher(self):
        return np.array([[_trigamma(self.a), -1.0 / self.b],
                         [-1.0 / self.b, self.a / self.b ** 2]])

    def natural_step(self, grad):
        return np.linalg.solve(self.fisher(), grad)

    def mean(self):
        if self.a <= 1:
            return math.nan
        return self.shift + self.b / (self.a - 1.0)

    def sd(self):
        if self.a <= 2:
            return math.nan
        return self.b / ((self.a - 1.0) * math.sqrt(self.a - 2.0))


def ig_score_and_fisher(var: InverseGammaVar, theta):
    """Score vector and Fisher information of the inverse-gamma family."""
    return var.score(theta), var.fisher()


# ---------------------------------------------------------------------------
# multivariate normal family in natural parameters (factor loadings)
# ---------------------------------------------------------------------------

def duplication_matrix(d):
    """0/1 matrix with D vech(A) = vec(A) for symmetric A."""
    p = d * (d + 1) // 2
    D = np.zeros((d * d, p))
    col = 0
    for j in range(d):
        for i in range(j, d):
            D[i * d + j, col] = 1.0
            D[j * d + i, col] = 1.0
            col += 1
    return D


def vech(A):
    d = A.shape[0]
    return np.concatenate([A[j:, j] for j in range(d)])


def unvech(v, d):
    A = np.zeros((d, d))
    pos = 0
    for j in range(d):
        A[j:, j] = v[pos:pos + d - j]
        A[j, j:] = v[pos:pos + d - j]
        pos += d - j
    return A


@dataclass(frozen=True)
class GaussianVar:
    """Multivariate normal q with natural parameters
    lam1 = Sigma^-1 mu and lam2 = -0.5 D' vec(Sigma^-1)."""

    lam1: np.ndarray
    lam2: np.ndarray

    @property
    def d(self):
        return len(self.lam1)

    @property
    def params(self):
        return np.concatenate([self.lam1, self.lam2])

    def with_params(self, vec):
        return GaussianVar(vec[:self.d].copy(), vec[self.d:].copy())

    def feasible(self, vec):
        d = self.d
        try:
            prec = -2.0 * unvech(
                np.linalg.solve(_dtd(d), vec[d:]), d)
            np.linalg.cholesky(prec)
            return True
        except np.linalg.LinAlgError:
            return False

    @classmethod
    def from_mu_sigma(cls, mu, sigma):
        mu = np.asarray(mu, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        prec = np.linalg.inv(sigma)
        d = len(mu)
        lam2 = -0.5 * duplication_matrix(d).T @ prec.reshape(-1)
        return cls(prec @ mu, lam2)

    def mu_sigma(self):
        d = self.d
        # vec^-1(D+' lam2) = -0.5 Sigma^-1
        prec = -2.0 * unvech(np.linalg.solve(_dtd(d), self.lam2), d)
        sigma = np.linalg.inv(prec)
        sigma = 0.5 * (sigma + sigma.T)
        return sigma @ self.lam1, sigma

    def sample(self, rng, size):
        mu, sigma = self.mu_sigma()
        chol = np.linalg.cholesky(sigma)
        return mu + rng.standard_normal((size, self.d)) @ chol.T

    def log_q(self, theta):
        mu, sigma = self.mu_sigma()
        chol = np.linalg.cholesky(sigma)
        dev = np.atleast_2d(theta) - mu
        y = np.linalg.solve(chol, dev.T)
        return (-0.5 * np.sum(np.square(y), axis=0)
                - np.sum(np.log(np.diag(chol)))
                - 0.5 * self.d * math.log(2 * math.pi))

    def score(self, theta):
        """d log q / d(lam1, lam2) rows per draw."""
        mu, sigma = self.mu_sigma()
        theta = np.atleast_2d(theta)
        top = theta - mu
        outer_ref = sigma + np.outer(mu, mu)
        rows = [np.concatenate([top[s], vech(np.outer(theta[s], theta[s])
                                             - outer_ref)])
                for s in range(theta.shape[0])]
        return np.array(rows)

    def fisher_inverse(self):
        mu, sigma = self.mu_sigma()
        d = self.d
        Dp = np.linalg.solve(_dtd(d), duplication_matrix(d).T)
        M = 2.0 * Dp @ np.kron(mu.reshape(-1, 1), np.eye(d))
        S = 2.0 * Dp @ np.kron(sigma, sigma) @ Dp.T
        S_inv = np.linalg.inv(S)
        top_left = np.linalg.inv(sigma) + M.T @ S_inv @ M
        out = np.block([[top_left, -M.T @ S_inv],
                        [-S_inv @ M, S_inv]])
        return 0.5 * (out + out.T)

    def natural_step(self, grad):
        return self.fisher_inverse() @ grad


def _dtd(d):
    D = duplication_matrix(d)
    return D.T @ D


def mvn_natural(var: GaussianVar):
    """(mu, Sigma) of the natural-parameter normal family."""
    return var.mu_sigma()


# ---------------------------------------------------------------------------
# the VBIL loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VBILConfig:
    S: int = 64
    lr0: float = 1.0
    tau: float = 10.0
    window: int = 5
    tol: float = 1e-4
    max_iterations: int = 200
    max_rel_step: float = 0.5
    seed: int = 0

    def learning_rate(self, t):
        # a_t = lr0/(tau+t) satisfies the Robbins-Monro conditions
        return self.lr0 / (self.tau + t)


@dataclass
class LowerBoundTrace:
    lb_full: list = field(default_factory=list)
    lb_per_obs: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    params: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    def windowed_mean(self, t, K):
        if t + 1 < K:
            return None
        return float(np.mean(self.lb_per_obs[t - K + 1:t + 1]))


def kl_gradient_estimate(var, log_h_batch, S, c_prev, rng, it_seed):
    """One gradient draw: H_hat = mean[(h - log q - c) * score].

    ``log_h_batch(thetas, seed)`` returns h = log(prior x Lhat) per draw
    (each estimate implicitly samples its auxiliary randomness from the
    seed); c is last iteration's component-wise control variate. Returns
    (H_hat, c_new, lb, mean score) with lb = mean(h - log q), the
    full-data lower-bound draw.
    """
    thetas = var.sample(rng, S)
    g = var.score(thetas)                       # (S, p)
    h = np.asarray(log_h_batch(thetas, it_seed), dtype=float)
    finite = np.isfinite(h)
    if not np.any(finite):
        raise ConvergenceError("all likelihood estimates were zero in a "
                               "VBIL gradient step")
    if not np.all(finite):
        # a zero estimate means "far worse than any finite draw"; a deep
        # finite floor keeps the repulsion without propagating -inf
        warnings.warn("flooring VBIL draws with zero likelihood estimate")
        h = np.where(finite, h, h[finite].min() - 100.0)
    log_q = np.asarray(var.log_q(thetas), dtype=float)
    c_prev = np.asarray(c_prev, dtype=float)
    H = np.mean((h[:, None] - log_q[:, None] - c_prev[None, :]) * g, axis=0)
    fg = h[:, None] * g
    var_g = np.var(g, axis=0, ddof=1)
    cov = np.mean((fg - fg.mean(axis=0)) * (g - g.mean(axis=0)), axis=0) \
        * len(h) / max(len(h) - 1, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c_new = np.where(var_g > 0, cov / var_g, 0.0)
    lb = float(np.mean(h - log_q))
    return H, c_new, lb


def vbil_run(var0, log_h_batch, n_obs, config: VBILConfig):
    """Iterate natural-gradient ascent of the estimated lower bound.

    Stops when the K-window mean of the per-observation lower bound
    moves by less than tol; a single-step LB collapse of more than 1e3
    halves the learning rate and retries once before aborting.
    """
    rng = np.random.Generator(np.random.Philox(
        key=qmc.fold_seed(config.seed, 0xB1)))
    var = var0
    p = len(var.params)
    c = np.zeros(p)
    # initialisation pass fixes the first control variate (step 1b)
    _, c, lb0 = kl_gradient_estimate(var, log_h_batch, config.S, np.zeros(p),
                                     rng, qmc.fold_seed(config.seed, 0))
    trace = LowerBoundTrace()
    retrying = False
    retry_salt = 0
    lr0 = config.lr0
    prev_lb = lb0
    prev_var = var
    t = 0
    while t < config.max_iterations:
        it_seed = qmc.fold_seed(config.seed, t + 1, retry_salt)
        H, c_next, lb = kl_gradient_estimate(var, log_h_batch, config.S, c,
                                             rng, it_seed)
        if lb < prev_lb - 1e3:
            # roll the offending step back, halve the rate, redraw once
            if retrying:
                raise ConvergenceError("VBIL lower bound diverged twice")
            warnings.warn("VBIL lower bound collapsed; halving learning rate")
            retrying = True
            retry_salt += 1
            lr0 *= 0.5
            var = prev_var
            continue
        retrying = False
        prev_var = var
        a_t = lr0 / (config.tau + t)
        step = var.natural_step(H)
        # trust region: cap the relative parameter change per iteration,
        # which tames the heavy-tailed early gradients of a diffuse q
        norm = np.linalg.norm(step)
        limit = config.max_rel_step * (np.linalg.norm(var.params) + 1e-8)
        if a_t * norm > limit:
            a_t = limit / norm
        vec = var.params + a_t * step
        shrink = 0
        while not var.feasible(vec) and shrink < 25:
            a_t *= 0.5
            vec = var.params + a_t * step
            shrink += 1
        if shrink == 25:
            raise ConvergenceError("VBIL step could not stay feasible")
        var = var.with_params(vec)
        c = c_next
        prev_lb = lb
        trace.lb_full.append(lb)
        trace.lb_per_obs.append(lb / n_obs)
        trace.grad_norm.append(float(np.linalg.norm(H)))
        trace.params.append(var.params.copy())
        K = config.window
        if t + 1 >= K + 1:
            w_now = trace.windowed_mean(t, K)
            w_prev = trace.windowed_mean(t - 1, K)
            if abs(w_now - w_prev) < config.tol:
                trace.converged = True
                t += 1
                break
        t += 1
    trace.iterations = t
    return var, trace
