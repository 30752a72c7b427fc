"""Clayton, Gumbel, and Gaussian-factor copulas.

Each family exposes its CDF, log density, and the K-variate partial
derivative D (the derivative of the CDF in its first K arguments with
the remaining arguments held fixed), which is what collapses
zero-lower-bound margins out of rectangle integrals. Densities and D
are computed in log space throughout; the Gumbel polynomial carries an
explicit sign and a cancellation monitor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, logsumexp, ndtr, ndtri

from .errors import NumericalError

INDEPENDENCE_TOL = 1e-12
_BOUNDARY_LO = 1e-300
_CANCELLATION_LIMIT = 1e8


class PrecisionLossError(NumericalError):
    """Catastrophic cancellation detected in a polynomial coefficient sum."""


class BoundaryWarning(UserWarning):
    """A density was evaluated at a nudged boundary input."""


# ---------------------------------------------------------------------------
# parameter types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClaytonParam:
    theta: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("Clayton requires theta > 0")


@dataclass(frozen=True)
class GumbelParam:
    theta: float

    def __post_init__(self):
        if not self.theta >= 1:
            raise ValueError("Gumbel requires theta >= 1")


@dataclass(frozen=True)
class GaussianFactorParam:
    """J x k loading matrix B with Sigma = B B' + I_J.

    B is lower triangular in its top k rows with strictly positive
    diagonal entries, the usual identification constraint.
    """

    loadings: np.ndarray

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        object.__setattr__(self, "loadings", B)
        J, k = B.shape
        if k > J:
            raise ValueError("more factors than margins")
        for i in range(min(J, k)):
            if B[i, i] <= 0:
                raise ValueError("diagonal loadings must be positive")
            if np.any(B[i, i + 1:] != 0):
                raise ValueError("loadings must be lower triangular in the "
                                 "top k rows")
        B.setflags(write=False)

    @property
    def J(self):
        return self.loadings.shape[0]

    @property
    def k(self):
        return self.loadings.shape[1]

    @staticmethod
    def free_index_pattern(J, k):
        """(row, col) pairs of the free entries, diagonal first per row."""
        return [(i, j) for i in range(J) for j in range(k) if j <= i]

    def free_vector(self):
        idx = self.free_index_pattern(self.J, self.k)
        return np.array([self.loadings[i, j] for i, j in idx])

    @classmethod
    def from_free_vector(cls, vec, J, k):
        B = np.zeros((J, k))
        for (i, j), v in zip(cls.free_index_pattern(J, k), vec):
            B[i, j] = v
        return cls(B)


def gaussian_sigma(p: GaussianFactorParam):
    """Sigma = B B' + I and its lower Cholesky factor."""
    B = p.loadings
    sigma = B @ B.T + np.eye(p.J)
    return sigma, np.linalg.cholesky(sigma)


# ---------------------------------------------------------------------------
# Clayton
# ---------------------------------------------------------------------------

def _interior(u):
    """Nudge boundary inputs into (0, 1) and warn."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or np.any(u >= 1):
        warnings.warn("boundary input nudged into the open unit interval",
                      BoundaryWarning, stacklevel=3)
        u = np.clip(u, _BOUNDARY_LO, 1 - 1e-16)
    return u


def _clayton_pow_sum(u, theta):
    """sum_j u_j^-theta - J + 1, computed as 1 + sum expm1(-theta log u)."""
    return 1.0 + np.sum(np.expm1(-theta * np.log(u)), axis=-1)


def clayton_cdf(u, p: ClaytonParam):
    """(sum u_j^-theta - J + 1)^(-1/theta); u_j = 0 gives the limit 0."""
    u = np.asarray(u, dtype=float)
    theta = p.theta
    zero = np.any(u <= 0, axis=-1)
    if theta < INDEPENDENCE_TOL:
        out = np.prod(u, axis=-1)
    else:
        safe = np.where(u <= 0, 0.5, u)
        out = np.exp(-np.log(_clayton_pow_sum(safe, theta)) / theta)
        out = np.where(zero, 0.0, out)
    return np.clip(out, 0.0, 1.0)


def _clayton_prefactor_table(J, theta):
    """Cumulative log prod_{k<K}(theta k + 1), indexed by K."""
    return np.concatenate(
        [[0.0], np.cumsum(np.log(theta * np.arange(J) + 1.0))])


def clayton_log_d_masked(u_eff, front_mask, theta):
    """log D where masked coordinates are differentiated.

    ``u_eff`` holds the evaluation point: sampled values on the front
    (masked) coordinates and fixed upper bounds on the rest. The mask
    may vary by row; K = mask.sum(-1) enters the prefactor and exponent.
    """
    u_eff = np.asarray(u_eff)
    if not np.issubdtype(u_eff.dtype, np.floating):
        u_eff = u_eff.astype(np.float64)
    mask = np.asarray(front_mask, dtype=bool)
    J = u_eff.shape[-1]
    K = mask.sum(axis=-1)
    with np.errstate(divide="ignore", over="ignore"):
        if theta < INDEPENDENCE_TOL:
            return np.sum(np.where(mask, 0.0, np.log(u_eff)), axis=-1)
        logu = np.log(u_eff)
        S = 1.0 + np.sum(np.expm1(-theta * logu), axis=-1)
        pref = _clayton_prefactor_table(J, theta)[K]
        return (pref
                - (1.0 + theta) * np.sum(np.where(mask, logu, 0.0), axis=-1)
                - (K + 1.0 / theta) * np.log(S))


def clayton_log_density(u, p: ClaytonParam):
    """Log copula density; boundary inputs are nudged and flagged."""
    u = _interior(u)
    mask = np.ones(u.shape, dtype=bool)
    return clayton_log_d_masked(u, mask, p.theta)


def clayton_density(u, p: ClaytonParam):
    return np.exp(clayton_log_density(u, p))


def clayton_log_d(u_front, b_tail, p: ClaytonParam):
    """log of d^K C / du_1..du_K at (u_front, b_tail)."""
    u_front = np.asarray(u_front, dtype=float)
    b_tail = np.asarray(b_tail, dtype=float)
    if u_front.shape[-1] == 0:
        return np.log(clayton_cdf(b_tail, p))
    u_eff = np.concatenate([u_front, b_tail], axis=-1)
    mask = np.zeros(u_eff.shape, dtype=bool)
    mask[..., :u_front.shape[-1]] = True
    return clayton_log_d_masked(u_eff, mask, p.theta)


def clayton_d(u_front, b_tail, p: ClaytonParam):
    return np.exp(clayton_log_d(u_front, b_tail, p))


# ---------------------------------------------------------------------------
# Gumbel
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8192)
def gumbel_poly_coeffs(K, theta):
    """Signed log coefficients of the degree-K density polynomial.

    Coefficient k is (1/k!) sum_{j=1..k} C(k,j) (-1)^(K-j)
    prod_{i=0..K-1}(j/theta - i), accumulated in log space with sign
    tracking. Raises PrecisionLossError when the alternating sum loses
    more than 8 digits.
    """
    log_abs = np.full(K, -np.inf)
    signs = np.ones(K)
    worst = 0.0
    i_grid = np.arange(K, dtype=float)
    for k in range(1, K + 1):
        j = np.arange(1, k + 1, dtype=float)
        x = j / theta
        diffs = x[:, None] - i_grid[None, :]
        zero_term = np.any(diffs == 0.0, axis=1)
        with np.errstate(divide="ignore"):
            log_r = np.where(zero_term, -np.inf,
                             np.sum(np.log(np.abs(diffs)), axis=1))
        sign_r = np.where((np.count_nonzero(diffs < 0, axis=1) % 2) == 0,
                          1.0, -1.0)
        log_binom = gammaln(k + 1) - gammaln(j + 1) - gammaln(k - j + 1)
        log_terms = log_binom - gammaln(k + 1) + log_r
        term_signs = sign_r * np.where((K - j.astype(int)) % 2 == 0, 1.0, -1.0)
        if np.all(np.isneginf(log_terms)):
            continue
        val, sgn = logsumexp(log_terms, b=term_signs, return_sign=True)
        if sgn == 0:
            continue
        log_abs[k - 1] = val
        signs[k - 1] = sgn
        worst = max(worst, float(np.exp(log_terms.max() - val)))
    if worst > _CANCELLATION_LIMIT:
        raise PrecisionLossError(
            f"Gumbel coefficient cancellation {worst:.2e} at K={K}, "
            f"theta={theta}")
    log_abs.setflags(write=False)
    signs.setflags(write=False)
    return log_abs, signs


def _gumbel_log_poly(log_x, K, theta):
    """log P_{K,theta}(x) from log x; raises if P evaluates non-positive."""
    log_abs, signs = gumbel_poly_coeffs(K, theta)
    k = np.arange(1, K + 1, dtype=float)
    terms = log_abs[None, :] + k[None, :] * np.asarray(log_x).reshape(-1)[:, None]
    val, sgn = logsumexp(terms, b=signs[None, :], axis=1, return_sign=True)
    if np.any(sgn <= 0):
        raise PrecisionLossError("Gumbel density polynomial evaluated "
                                 "non-positive; precision exhausted")
    return val.reshape(np.shape(log_x))


def gumbel_cdf(u, p: GumbelParam):
    """exp(-[sum (-log u_j)^theta]^(1/theta))."""
    u = np.asarray(u, dtype=float)
    theta = p.theta
    if theta - 1 < INDEPENDENCE_TOL:
        return np.prod(u, axis=-1)
    zero = np.any(u <= 0, axis=-1)
    safe = np.where(u <= 0, 0.5, u)
    w = -np.log(safe)
    with np.errstate(divide="ignore"):
        log_t = logsumexp(theta * np.log(w), axis=-1)
    out = np.exp(-np.exp(log_t / theta))
    return np.clip(np.where(zero, 0.0, out), 0.0, 1.0)


def gumbel_log_d_masked(u_eff, front_mask, theta):
    """log D for the Gumbel family; masked coordinates differentiated.

    Any zero coordinate sends the derivative to its limit 0 (log -inf);
    computing through would produce inf - inf.
    """
    u_eff = np.asarray(u_eff)
    if not np.issubdtype(u_eff.dtype, np.floating):
        u_eff = u_eff.astype(np.float64)
    mask = np.asarray(front_mask, dtype=bool)
    with np.errstate(divide="ignore"):
        if theta - 1 < INDEPENDENCE_TOL:
            return np.sum(np.where(mask, 0.0, np.log(u_eff)), axis=-1)
    zero = np.any(u_eff <= 0, axis=-1)
    safe = np.where(u_eff <= 0, 0.5, u_eff)
    K_rows = mask.sum(axis=-1)
    w = -np.log(safe)
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
        log_t = logsumexp(theta * log_w, axis=-1)
    log_x = log_t / theta
    x = np.exp(log_x)
    front_logw = np.sum(np.where(mask, log_w, 0.0), axis=-1)
    front_w = np.sum(np.where(mask, w, 0.0), axis=-1)
    out = np.empty(np.broadcast(K_rows, log_t).shape)
    flat_K = np.broadcast_to(K_rows, out.shape).reshape(-1)
    poly = np.empty(flat_K.shape)
    lx = np.broadcast_to(log_x, out.shape).reshape(-1)
    for K in np.unique(flat_K):
        sel = flat_K == K
        poly[sel] = 0.0 if K == 0 else _gumbel_log_poly(lx[sel], int(K), theta)
    poly = poly.reshape(out.shape)
    out = (K_rows * np.log(theta) - x + (theta - 1.0) * front_logw
           + front_w - K_rows * log_t + poly)
    return np.where(np.broadcast_to(zero, out.shape), -np.inf, out)


def gumbel_log_density(u, p: GumbelParam):
    u = _interior(u)
    return gumbel_log_d_masked(u, np.ones(u.shape, dtype=bool), p.theta)


def gumbel_density(u, p: GumbelParam):
    return np.exp(gumbel_log_density(u, p))


def gumbel_log_d(u_front, b_tail, p: GumbelParam):
    u_front = np.asarray(u_front, dtype=float)
    b_tail = np.asarray(b_tail, dtype=float)
    if u_front.shape[-1] == 0:
        return np.log(gumbel_cdf(b_tail, p))
    u_eff = np.concatenate([u_front, b_tail], axis=-1)
    mask = np.zeros(u_eff.shape, dtype=bool)
    mask[..., :u_front.shape[-1]] = True
    return gumbel_log_d_masked(u_eff, mask, p.theta)


def gumbel_d(u_front, b_tail, p: GumbelParam):
    return np.exp(gumbel_log_d(u_front, b_tail, p))


# ---------------------------------------------------------------------------
# family dispatch helpers
# ---------------------------------------------------------------------------

def cdf(model, u):
    if isinstance(model, ClaytonParam):
        return clayton_cdf(u, model)
    if isinstance(model, GumbelParam):
        return gumbel_cdf(u, model)
    raise TypeError(f"no closed-form CDF dispatch for {type(model).__name__}")


def log_density(model, u):
    if isinstance(model, ClaytonParam):
        return clayton_log_density(u, model)
    if isinstance(model, GumbelParam):
        return gumbel_log_density(u, model)
    if isinstance(model, GaussianFactorParam):
        return _gaussian_log_density(u, model)
    raise TypeError(type(model).__name__)


def log_d_masked(model, u_eff, front_mask):
    if isinstance(model, ClaytonParam):
        return clayton_log_d_masked(u_eff, front_mask, model.theta)
    if isinstance(model, GumbelParam):
        return gumbel_log_d_masked(u_eff, front_mask, model.theta)
    raise TypeError("D-function dispatch is Archimedean only")


def _gaussian_log_density(u, p: GaussianFactorParam):
    """Gaussian copula density on the unit cube (for the DA baseline)."""
    from scipy.linalg import solve_triangular

    u = _interior(u)
    sigma, chol = gaussian_sigma(p)
    sd = np.sqrt(np.diag(sigma))
    z = ndtri(u) * sd
    y = solve_triangular(chol, np.atleast_2d(z).T, lower=True).T
    quad = np.sum(np.square(y), axis=-1).reshape(np.shape(u)[:-1])
    logdet = np.sum(np.log(np.diag(chol)))
    std_quad = np.sum(np.square(z / sd), axis=-1)
    return -0.5 * quad - logdet + 0.5 * std_quad + np.sum(np.log(sd))


# ---------------------------------------------------------------------------
# conditional CDFs and inverses
# ---------------------------------------------------------------------------

def conditional_cdf(model, j, u_j, u_rest):
    """P(U_j <= u_j | U_rest = u_rest); vectorized over rows.

    Archimedean families are exchangeable, so only the rest values
    matter; the Gaussian model uses its covariance partition for
    margin j.
    """
    u_j = np.asarray(u_j, dtype=float)
    u_rest = np.atleast_2d(np.asarray(u_rest, dtype=float))
    if isinstance(model, GaussianFactorParam):
        return _gaussian_conditional(model, j, u_rest, u=u_j, invert=False)
    log_num = log_d_masked(
        model,
        np.concatenate([u_rest, u_j.reshape(-1, 1)], axis=-1),
        np.concatenate([np.ones_like(u_rest, dtype=bool),
                        np.zeros((u_rest.shape[0], 1), dtype=bool)], axis=-1))
    log_den = log_density(model, u_rest)
    return np.clip(np.exp(log_num - log_den), 0.0, 1.0)


def conditional_inverse(model, j, w, u_rest, tol=1e-10, max_iter=200):
    """Inverse of conditional_cdf in u_j; bisection for Archimedean."""
    w = np.asarray(w, dtype=float)
    u_rest = np.atleast_2d(np.asarray(u_rest, dtype=float))
    if w.size == 0:
        return np.empty(0)
    if isinstance(model, GaussianFactorParam):
        return _gaussian_conditional(model, j, u_rest, w=w, invert=True)
    lo = np.full(w.shape, 1e-12)
    hi = np.full(w.shape, 1.0 - 1e-12)
    log_den = log_density(model, u_rest)
    ones = np.ones_like(u_rest, dtype=bool)
    zcol = np.zeros((u_rest.shape[0], 1), dtype=bool)
    mask = np.concatenate([ones, zcol], axis=-1)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = np.exp(log_d_masked(
            model, np.concatenate([u_rest, mid.reshape(-1, 1)], axis=-1),
            mask) - log_den)
        above = val >= w
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.max(hi - lo) < tol:
            return 0.5 * (lo + hi)
    raise RuntimeError("conditional inverse bisection did not converge")


def _gaussian_conditional(p, j, u_rest, u=None, w=None, invert=False):
    sigma, _ = gaussian_sigma(p)
    sd = np.sqrt(np.diag(sigma))
    rest = [i for i in range(p.J) if i != j]
    z_rest = ndtri(np.clip(u_rest, 1e-16, 1 - 1e-16)) * sd[rest]
    s_rr = sigma[np.ix_(rest, rest)]
    s_jr = sigma[j, rest]
    coef = np.linalg.solve(s_rr, s_jr)
    mu = z_rest @ coef
    var = sigma[j, j] - s_jr @ coef
    sdev = np.sqrt(max(var, 1e-300))
    if not invert:
        z_j = ndtri(np.clip(u, 1e-16, 1 - 1e-16)) * sd[j]
        return ndtr((z_j - mu) / sdev)
    z_j = ndtri(np.clip(w, 1e-16, 1 - 1e-16)) * sdev + mu
    return ndtr(z_j / sd[j])


# ---------------------------------------------------------------------------
# exact samplers
# ---------------------------------------------------------------------------

def _positive_stable(alpha, size, rng):
    """One-sided stable draws with Laplace transform exp(-t^alpha)."""
    theta_u = rng.uniform(0.0, np.pi, size)
    e = rng.standard_exponential(size)
    num = (np.sin((1 - alpha) * theta_u)
           * np.sin(alpha * theta_u) ** (alpha / (1 - alpha)))
    den = np.sin(theta_u) ** (1 / (1 - alpha))
    return (num / den / e) ** ((1 - alpha) / alpha)


def sample_copula(model, n, seed, J=None):
    """Exact i.i.d. samples; frailty constructions for the Archimedean
    families, factor draws for the Gaussian."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    if isinstance(model, GaussianFactorParam):
        sigma, _ = gaussian_sigma(model)
        f = rng.standard_normal((n, model.k))
        eps = rng.standard_normal((n, model.J))
        z = f @ model.loadings.T + eps
        return ndtr(z / np.sqrt(np.diag(sigma)))
    if J is None:
        raise ValueError("Archimedean sampling needs the dimension J")
    theta = model.theta
    if isinstance(model, ClaytonParam):
        if theta < INDEPENDENCE_TOL:
            return rng.random((n, J))
        v = rng.gamma(1.0 / theta, 1.0, size=n)
        e = rng.standard_exponential((n, J))
        return (1.0 + e / v[:, None]) ** (-1.0 / theta)
    if isinstance(model, GumbelParam):
        if theta - 1 < INDEPENDENCE_TOL:
            return rng.random((n, J))
        alpha = 1.0 / theta
        v = _positive_stable(alpha, n, rng)
        e = rng.standard_exponential((n, J))
        return np.exp(-((e / v[:, None]) ** alpha))
    raise TypeError(type(model).__name__)


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InverseGammaPrior:
    """IG(alpha, beta) on theta - shift (shift=1 for the Gumbel family)."""

    alpha: float
    beta: float
    shift: float = 0.0

    def log_pdf(self, theta):
        x = np.asarray(theta, dtype=float) - self.shift
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (self.alpha * np.log(self.beta) - gammaln(self.alpha)
                   - (self.alpha + 1.0) * np.log(x) - self.beta / x)
        return np.where(x > 0, out, -np.inf)


@dataclass(frozen=True)
class UniformPrior:
    lo: float
    hi: float

    def log_pdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        inside = (theta >= self.lo) & (theta <= self.hi)
        return np.where(inside, -np.log(self.hi - self.lo), -np.inf)


@dataclass(frozen=True)
class NormalLoadingsPrior:
    """Independent N(mu0, var0) on free loadings, diagonals truncated > 0."""

    mu0: float = 0.0
    var0: float = 10.0
    truncate: bool = True

    def log_pdf_vector(self, vec, J, k):
        vec = np.asarray(vec, dtype=float)
        pattern = GaussianFactorParam.free_index_pattern(J, k)
        out = -0.5 * np.sum((vec - self.mu0) ** 2) / self.var0 \
            - 0.5 * len(vec) * np.log(2 * np.pi * self.var0)
        if self.truncate:
            diag = np.array([d for d, (i, j) in enumerate(pattern) if i == j])
            if np.any(vec[diag] <= 0):
                return -np.inf
            out += len(diag) * np.log(2.0)
        return out

    def log_pdf(self, p: GaussianFactorParam):
        return self.log_pdf_vector(p.free_vector(), p.J, p.k)
