"""Unbiased estimation of per-observation likelihood contributions.

Discrete observations contribute rectangle probabilities on the unit
cube. The Archimedean path rescales uniforms into the rectangle and
averages the copula D-function, collapsing zero-lower-bound margins
into fixed upper-bound arguments; the Gaussian path runs the
sequential-conditioning transformation on the z-scale rectangle. Mixed
margins condition the discrete block on the continuous one.

Auxiliary randomness is carried as seed capsules (AuxState) so the
samplers can refresh, correlate, or block-update it without ever
storing materialized uniforms in the chain state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri

from . import copulas as cp
from . import qmc
from .errors import ConfigError, DataError
from .marginals import DatasetBounds, ObservationBounds

_PHI_CLIP = (1e-16, 1.0 - 1e-16)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# model and estimator configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Copula family plus the shape information that fixes its
    parameter vector layout."""

    family: str
    J: int
    factors: int = 1

    def __post_init__(self):
        if self.family not in ("clayton", "gumbel", "gaussian"):
            raise ConfigError(f"unknown copula family {self.family!r}")

    @property
    def n_params(self):
        if self.family == "gaussian":
            return len(cp.GaussianFactorParam.free_index_pattern(
                self.J, self.factors))
        return 1

    def to_model(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.family == "clayton":
            return cp.ClaytonParam(float(theta[0]))
        if self.family == "gumbel":
            return cp.GumbelParam(float(theta[0]))
        return cp.GaussianFactorParam.from_free_vector(
            theta, self.J, self.factors)


@dataclass(frozen=True)
class EstimatorConfig:
    stream: str
    M: int
    dtype: str = "float64"

    def __post_init__(self):
        if self.stream not in ("mc", "rqmc"):
            raise ConfigError(f"unknown stream kind {self.stream!r}")
        if self.M < 1:
            raise ConfigError("M must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.stream == "rqmc":
            # nets need a power of two; round up and use all points
            object.__setattr__(self, "M", 1 << (self.M - 1).bit_length())

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# ---------------------------------------------------------------------------
# auxiliary randomness capsules
# ---------------------------------------------------------------------------

_INF_END = qmc.INF


@dataclass(frozen=True)
class AuxState:
    """Seed capsule for the complete auxiliary randomness u.

    kind "mc": per-observation Philox seeds. kind "rqmc": per-observation
    scramble-tree segment seeds sharing one level structure. kind
    "normal": materialized standard normals (the correlated-MC variant
    evolves these with an AR(1) step and maps them through Phi).
    """

    kind: str
    seeds: np.ndarray | None = None
    level_ends: tuple = ()
    normals: np.ndarray | None = None

    @classmethod
    def fresh(cls, kind, seed, n, M=None, dim=None):
        if kind == "mc":
            return cls("mc", qmc.fold_seed_array(seed, np.arange(n)))
        if kind == "rqmc":
            return cls("rqmc", qmc.fold_seed_array(seed, np.arange(n))[:, None],
                       (_INF_END,))
        if kind == "normal":
            return cls("normal",
                       normals=qmc.normal_block(seed, 0, (n, M, dim)))
        raise ConfigError(f"unknown aux kind {kind!r}")

    @property
    def n(self):
        return len(self.normals) if self.kind == "normal" else len(self.seeds)

    def refresh_rows(self, rows, seed):
        """Independent new randomness for a subset of observations."""
        if self.kind == "normal":
            normals = self.normals.copy()
            normals[rows] = qmc.normal_block(seed, 0, self.normals[rows].shape)
            return replace(self, normals=normals)
        new = qmc.fold_seed_array(seed, rows)
        if self.kind == "mc":
            seeds = self.seeds.copy()
            seeds[rows] = new
            return replace(self, seeds=seeds)
        # refreshed rows become depth-0 trees: every digit level of those
        # observations keys off the fresh seed, structure unchanged
        seeds = self.seeds.copy()
        seeds[rows] = new[:, None]
        return replace(self, seeds=seeds)

    def evolve_normals(self, phi, seed):
        """AR(1) step u' = phi u + sqrt(1-phi^2) u* on the normal state."""
        fresh = qmc.normal_block(seed, 0, self.normals.shape)
        return replace(self, normals=phi * self.normals
                       + math.sqrt(1.0 - phi * phi) * fresh)

    def correlated_child(self, depth, seed):
        """Scramble trees reusing levels 1..depth, fresh below."""
        if self.kind != "rqmc":
            raise ConfigError("correlation depth applies to rqmc aux only")
        if depth == _INF_END:
            return self
        depth = int(depth)
        n = self.seeds.shape[0]
        fresh = qmc.fold_seed_array(seed, np.arange(n))
        if depth == 0:
            return AuxState("rqmc", fresh[:, None], (_INF_END,))
        ends, cols = [], []
        for i, end in enumerate(self.level_ends):
            if end >= depth:
                ends.append(depth)
                cols.append(self.seeds[:, i])
                break
            ends.append(end)
            cols.append(self.seeds[:, i])
        ends.append(_INF_END)
        cols.append(fresh)
        return AuxState("rqmc", np.column_stack(cols), tuple(ends))

    def uniforms(self, rows, M, dim, net=None, dtype=np.float64):
        """Materialize the uniform blocks for the given observation rows."""
        if dim == 0:
            return np.zeros((len(rows), M, 0), dtype=dtype)
        if self.kind == "normal":
            return ndtr(self.normals[rows]).astype(dtype, copy=False)
        if self.kind == "mc":
            out = np.empty((len(rows), M, dim), dtype=dtype)
            for i, t in enumerate(rows):
                out[i] = qmc.uniform_block(int(self.seeds[t]), 0, (M, dim),
                                           dtype)
            return out
        return qmc.scramble_stream(net, self.level_ends, self.seeds[rows],
                                   dtype)


# ---------------------------------------------------------------------------
# single-observation estimators (the spec-level operations)
# ---------------------------------------------------------------------------

def rectangle_estimate(bounds: ObservationBounds, model, points):
    """Unbiased rectangle-probability estimate using the full J-dim
    integrand prod (b-a) * mean c(a + (b-a) u)."""
    if not bool(np.all(bounds.discrete)):
        raise DataError("rectangle_estimate requires all-discrete margins")
    a, b = bounds.a, bounds.b
    if np.any(a == b):
        return 0.0
    u = a[None, :] + (b - a)[None, :] * np.asarray(points)
    log_c = cp.log_density(model, u)
    vol = float(np.sum(np.log(b - a)))
    return float(np.exp(vol) * np.mean(np.exp(log_c)))


def reduced_rectangle_estimate(bounds: ObservationBounds, model, points):
    """Rectangle estimate through the D-function, integrating only the
    margins with a_j > 0; exact (the CDF) when no margin has a_j > 0."""
    if not bool(np.all(bounds.discrete)):
        raise DataError("reduced_rectangle_estimate requires discrete margins")
    a, b = bounds.a, bounds.b
    if np.any(a == b):
        return 0.0
    front = a > 0
    K = int(front.sum())
    if K == 0:
        return float(cp.cdf(model, b))
    points = np.asarray(points)[:, :K]
    u_eff = np.broadcast_to(b, (points.shape[0], len(b))).copy()
    u_eff[:, front] = a[front] + (b - a)[front] * points
    log_d = cp.log_d_masked(model, u_eff, front[None, :])
    vol = float(np.sum(np.log((b - a)[front])))
    return float(np.exp(vol) * np.mean(np.exp(log_d)))


def genz_bretz(chol, a, b, points):
    """Sequential-conditioning estimate of the MVN rectangle probability.

    Exact at J=1; otherwise averages the per-point telescoping product
    of conditioned Phi-interval widths over the supplied uniforms.
    """
    a = np.asarray(a, dtype=float)[None, :]
    b = np.asarray(b, dtype=float)[None, :]
    w = np.asarray(points, dtype=float)
    est = _genz_batch(np.asarray(chol), a, b, w[None, :, :])
    return float(est[0])


def _genz_batch(chol, A, B, W):
    """Vectorized Genz-Bretz over observations: A,B (n,J), W (n,M,J-1)."""
    n, J = A.shape
    M = W.shape[1] if J > 1 else 1
    c = np.diag(chol)
    with np.errstate(invalid="ignore"):
        d = np.broadcast_to(ndtr(A[:, 0] / c[0])[:, None], (n, M)).copy()
        e = np.broadcast_to(ndtr(B[:, 0] / c[0])[:, None], (n, M)).copy()
    f = e - d
    if J == 1:
        return f[:, 0]
    y = np.empty((n, M, J - 1))
    clamped = False
    for i in range(1, J):
        mid = d + W[:, :, i - 1] * (e - d)
        if not clamped and (np.any(mid < _PHI_CLIP[0]) or
                            np.any(mid > _PHI_CLIP[1])):
            clamped = True
        y[:, :, i - 1] = ndtri(np.clip(mid, *_PHI_CLIP))
        lin = y[:, :, :i] @ chol[i, :i]
        with np.errstate(invalid="ignore"):
            d = ndtr((A[:, i, None] - lin) / c[i])
            e = ndtr((B[:, i, None] - lin) / c[i])
        f = f * (e - d)
    if clamped:
        warnings.warn("Phi-inverse argument clamped inside Genz-Bretz",
                      RuntimeWarning, stacklevel=2)
    return f.mean(axis=1)


def mvn_rectangle_order(mean_width):
    """Global variable ordering: ascending expected interval width."""
    return np.argsort(mean_width, kind="stable")


# ---------------------------------------------------------------------------
# likelihood estimate container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LikelihoodEstimate:
    log_total: float
    per_observation: np.ndarray
    points_used: int
    provenance: str
    zero_indices: tuple = ()


def _reduce_estimate(log_per, M, provenance):
    zeros = tuple(int(i) for i in np.flatnonzero(np.isneginf(log_per)))
    total = -math.inf if zeros else math.fsum(log_per.tolist())
    return LikelihoodEstimate(total, log_per, M, provenance, zeros)


# ---------------------------------------------------------------------------
# dataset-level estimator
# ---------------------------------------------------------------------------

class CopulaLikelihood:
    """Vectorized log-likelihood estimator for one dataset and family.

    The observation blocks of the auxiliary stream are indexed by
    observation, so block samplers can refresh a subset; the reduction
    over observations is exact (fsum), making the total independent of
    evaluation order.
    """

    def __init__(self, spec: ModelSpec, bounds: DatasetBounds,
                 config: EstimatorConfig):
        if spec.J != bounds.J:
            raise ConfigError("model dimension does not match bounds")
        self.spec = spec
        self.bounds = bounds
        self.config = config
        self.n = bounds.n
        disc = bounds.discrete
        self.any_continuous = not bool(np.all(disc))
        if self.any_continuous and spec.family == "clayton":
            raise ConfigError("mixed margins are supported for the Gumbel "
                              "and Gaussian families only")

        if spec.family == "gaussian":
            self.r = int(disc.sum())
            self.dim = max(spec.J - 1, 0) if not self.any_continuous \
                else max(self.r - 1, 0)
            self._prep_gaussian()
        else:
            self.dim = spec.J
            self._prep_archimedean()

        self.net = None
        if config.stream == "rqmc" and self.dim > 0:
            m = int(math.log2(config.M))
            self.net = qmc.generate_net(qmc.NetParams(m=m, s=self.dim))

    # -- shared helpers ----------------------------------------------------

    def fresh_aux(self, seed) -> AuxState:
        kind = "rqmc" if self.config.stream == "rqmc" else "mc"
        return AuxState.fresh(kind, seed, self.n, self.config.M, self.dim)

    def fresh_normal_aux(self, seed) -> AuxState:
        return AuxState.fresh("normal", seed, self.n, self.config.M, self.dim)

    def materialize(self, aux: AuxState, rows=None):
        rows = np.arange(self.n) if rows is None else np.asarray(rows)
        return aux.uniforms(rows, self.config.M, self.dim, self.net,
                            self.config.np_dtype)

    def _prep_archimedean(self):
        bd = self.bounds
        dt = self.config.np_dtype
        disc = bd.discrete[None, :]
        self.sampled = disc & (bd.a > 0)           # integrated coords
        self.front = self.sampled | ~disc          # differentiated coords
        fixed_vals = np.where(disc, bd.b, bd.u)
        # fused affine map: u_eff = offset + scale * u, exact for both
        # sampled (a + (b-a)u) and fixed (offset, scale 0) coordinates
        self.offset = np.where(self.sampled, bd.a, fixed_vals).astype(dt)
        self.scale = np.where(self.sampled, bd.b - bd.a, 0.0).astype(dt)
        with np.errstate(divide="ignore"):
            width = np.where(self.sampled, bd.b - bd.a, 1.0)
        self.log_vol = np.sum(np.log(width), axis=1)
        self.pos = np.maximum(np.cumsum(self.sampled, axis=1) - 1, 0)
        self.log_f_row = bd.log_f.sum(axis=1)

    def _prep_gaussian(self):
        bd = self.bounds
        disc = bd.discrete
        d_cols = np.flatnonzero(disc)
        c_cols = np.flatnonzero(~disc)
        width = (bd.b - bd.a)[:, d_cols].mean(axis=0) if len(d_cols) else \
            np.zeros(0)
        order = mvn_rectangle_order(width)
        self.d_cols = d_cols[order]
        self.c_cols = c_cols
        with np.errstate(divide="ignore"):
            self.qa = ndtri(np.clip(bd.a[:, self.d_cols], 0.0, 1.0))
            self.qb = ndtri(np.clip(bd.b[:, self.d_cols], 0.0, 1.0))
        if len(c_cols):
            self.qc = ndtri(bd.u[:, c_cols])
        self.log_f_row = bd.log_f.sum(axis=1)

    # -- evaluation ---------------------------------------------------------

    def log_likelihood(self, theta, aux, uniforms=None) -> LikelihoodEstimate:
        """Estimate log L(theta) with the observation-keyed randomness.

        ``uniforms`` may carry a pre-materialized (n, M, dim) tensor for
        the same aux state; per-observation estimates always use the
        observation's own block.
        """
        model = self.spec.to_model(theta)
        U = self.materialize(aux) if uniforms is None else uniforms
        if self.spec.family == "gaussian":
            log_per = self._gaussian_log_per(model, U)
        else:
            log_per = self._archimedean_log_per(model, U)
        return _reduce_estimate(log_per, self.config.M,
                                f"{self.config.stream}:{aux.kind}")

    def _archimedean_log_per(self, model, U):
        u_w = np.take_along_axis(U, self.pos[:, None, :], axis=2)
        u_eff = self.offset[:, None, :] + self.scale[:, None, :] * u_w
        log_d = cp.log_d_masked(model, u_eff, self.front[:, None, :])
        M = U.shape[1]
        with np.errstate(divide="ignore"):
            log_mean = np.asarray(logsumexp(log_d, axis=1),
                                  dtype=np.float64) - math.log(M)
        return self.log_vol + log_mean + self.log_f_row

    def _gaussian_log_per(self, model, U):
        sigma, _ = cp.gaussian_sigma(model)
        sd = np.sqrt(np.diag(sigma))
        d, c = self.d_cols, self.c_cols
        A = self.qa * sd[d]
        B = self.qb * sd[d]
        if len(c) == 0:
            chol = np.linalg.cholesky(sigma[np.ix_(d, d)])
            est = _genz_batch(chol, A, B, U)
            with np.errstate(divide="ignore"):
                return np.log(np.maximum(est, 0.0))
        s_cc = sigma[np.ix_(c, c)]
        chol_c = np.linalg.cholesky(s_cc)
        z_c = self.qc * sd[c]
        # continuous part: n(z_C; 0, S_CC) + per-margin corrections
        from scipy.linalg import solve_triangular
        y = solve_triangular(chol_c, z_c.T, lower=True).T
        log_norm = (-0.5 * np.sum(np.square(y), axis=1)
                    - np.sum(np.log(np.diag(chol_c)))
                    - len(c) * _LOG_SQRT_2PI)
        corr = np.sum(0.5 * np.log(sigma[c, c])[None, :]
                      + 0.5 * np.square(self.qc) + _LOG_SQRT_2PI, axis=1)
        log_cont = log_norm + corr + self.log_f_row
        if len(d) == 0:
            return log_cont
        s_dc = sigma[np.ix_(d, c)]
        coef = np.linalg.solve(s_cc, s_dc.T).T      # (r, |C|)
        mu = z_c @ coef.T                            # (n, r)
        s_cond = sigma[np.ix_(d, d)] - coef @ s_dc.T
        chol_cond = np.linalg.cholesky(s_cond)
        est = _genz_batch(chol_cond, A - mu, B - mu, U)
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(est, 0.0)) + log_cont


def mixed_log_density(bounds: ObservationBounds, model, points):
    """Per-observation mixed log density for the Gaussian factor copula:
    log Pr(discrete rectangle | continuous) + log p(x_continuous)."""
    ds = DatasetBounds(bounds.a[None, :], bounds.b[None, :],
                       bounds.u[None, :], bounds.log_f[None, :],
                       bounds.discrete)
    spec = ModelSpec("gaussian", ds.J, model.k)
    config = EstimatorConfig("mc", np.asarray(points).shape[0])
    engine = CopulaLikelihood(spec, ds, config)
    log_per = engine._gaussian_log_per(model, np.asarray(points)[None, :, :])
    return float(log_per[0])
