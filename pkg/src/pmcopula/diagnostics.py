"""Chain and estimator quality metrics: IACT, TNV, variance-of-log-
likelihood studies, k-fold LPDS, and kernel density summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import qmc
from .errors import ConvergenceError


# ---------------------------------------------------------------------------
# integrated autocorrelation time
# ---------------------------------------------------------------------------

def _autocorrelation(x):
    n = len(x)
    x = np.asarray(x, dtype=float) - np.mean(x)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, n=size)
    acf = np.fft.irfft(f * np.conj(f), n=size)[:n].real
    if acf[0] <= 0:
        return None
    return acf / acf[0]


def iact(series, c=5.0, min_length=100):
    """1 + 2 sum of autocorrelations with Sokal's adaptive truncation:
    the window W is the smallest lag with W >= c * tau_hat(W)."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 1 or len(series) < min_length:
        raise ValueError(f"need a 1-d series of length >= {min_length}")
    rho = _autocorrelation(series)
    if rho is None:
        import warnings
        warnings.warn("constant series has undefined IACT")
        return math.nan
    taus = 1.0 + 2.0 * np.cumsum(rho[1:])
    window = np.arange(1, len(taus) + 1)
    ok = window >= c * taus
    W = int(np.argmax(ok)) if np.any(ok) else len(taus) - 1
    return float(taus[W])


def tnv(avg_iact, computing_time):
    """Time normalized variance: averaged IACT times computing time."""
    if avg_iact <= 0 or computing_time <= 0:
        raise ValueError("IACT and computing time must be positive")
    return avg_iact * computing_time


def relative_tnv(tnv_method, tnv_baseline):
    return tnv_method / tnv_baseline


@dataclass(frozen=True)
class ChainSummary:
    names: tuple
    means: np.ndarray
    sds: np.ndarray
    iacts: np.ndarray
    avg_iact: float
    ct_seconds: float
    tnv: float

    def to_dict(self):
        return {
            "parameters": {
                name: {"mean": float(m), "sd": float(s), "iact": float(i)}
                for name, m, s, i in zip(self.names, self.means, self.sds,
                                         self.iacts)},
            "avg_iact": float(self.avg_iact),
            "ct_seconds": float(self.ct_seconds),
            "tnv": float(self.tnv),
        }


def summarize_chain(result, names=None) -> ChainSummary:
    draws = result.draws
    d = draws.shape[1]
    names = tuple(names or [f"theta_{i}" for i in range(d)])
    means = draws.mean(axis=0)
    sds = draws.std(axis=0, ddof=1)
    iacts = np.array([iact(draws[:, i]) for i in range(d)])
    finite = iacts[np.isfinite(iacts)]
    avg = float(finite.mean()) if len(finite) else math.nan
    ct = result.seconds
    return ChainSummary(names, means, sds, iacts, avg, ct,
                        tnv(avg, ct) if np.isfinite(avg) and ct > 0
                        else math.nan)


# ---------------------------------------------------------------------------
# variance-of-log-likelihood study
# ---------------------------------------------------------------------------

def loglik_variance_study(engine_factory, theta, m_grid, streams, reps,
                          seed, threads=1):
    """Sample variance of log Lhat per (M, stream) cell at fixed theta.

    Returns a list of cell dicts (M, stream, variance, zero_estimates),
    in grid order, ready for CSV emission. Replicates are independent
    and evaluated as a (thread-)parallel map; per-rep seeds make the
    result identical for any degree of parallelism.
    """
    from concurrent.futures import ThreadPoolExecutor

    if reps < 30:
        raise ValueError("need reps >= 30 for a stable variance cell")
    cells = []
    for stream in streams:
        for M in m_grid:
            engine = engine_factory(M, stream)

            def one(r):
                aux = engine.fresh_aux(
                    qmc.fold_seed(seed, hash((stream, M)) & 0xFFFF, r))
                est = engine.log_likelihood(theta, aux)
                return est.log_total, bool(est.zero_indices)

            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    results = list(pool.map(one, range(reps)))
            else:
                results = [one(r) for r in range(reps)]
            vals = np.array([v for v, _ in results])
            zeros = sum(z for _, z in results)
            finite = vals[np.isfinite(vals)]
            cells.append({
                "M": int(M),
                "stream": stream,
                "variance": float(np.var(finite, ddof=1))
                if len(finite) > 1 else math.nan,
                "zero_estimates": int(zeros),
                "reps": int(reps),
            })
    return cells


# ---------------------------------------------------------------------------
# cross-validated log predictive density score
# ---------------------------------------------------------------------------

def fold_indices(n, folds, seed):
    """Seed-deterministic partition of range(n) into near-equal folds."""
    order = np.random.Generator(
        np.random.Philox(key=qmc.fold_seed(seed, 0xF0))).permutation(n)
    return [np.sort(order[k::folds]) for k in range(folds)]


def lpds(X, margin_specs, model_spec, prior_logpdf, transform, pm_config,
         est_config, seed, theta0, folds=5, predict_factor=4,
         max_predict_draws=100):
    """k-fold cross-validated log predictive density.

    Each fold fits a PM chain on the training part; the held-out
    predictive density is the posterior-draw average of per-observation
    likelihood estimates computed at predict_factor x M points.
    """
    from .likelihood import CopulaLikelihood, EstimatorConfig
    from .marginals import build_dataset_bounds, fit_margin
    from .samplers import run_pm_chain

    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < folds:
        raise ValueError("need at least one observation per fold")
    total = 0.0
    per_fold = []
    for k, test_idx in enumerate(fold_indices(n, folds, seed)):
        train_idx = np.setdiff1d(np.arange(n), test_idx)
        margins = [fit_margin(X[train_idx, j], spec_j)
                   for j, spec_j in enumerate(margin_specs)]
        train_bounds = build_dataset_bounds(X[train_idx], margins)
        engine = CopulaLikelihood(model_spec, train_bounds, est_config)
        chain = run_pm_chain(engine, prior_logpdf, transform, pm_config,
                             qmc.fold_seed(seed, 0xCF, k), theta0)
        if not np.all(np.isfinite(chain.draws)):
            raise ConvergenceError(f"fold {k} chain failed")
        draws = chain.draws
        if len(draws) > max_predict_draws:
            step = len(draws) // max_predict_draws
            draws = draws[::step][:max_predict_draws]
        test_bounds = build_dataset_bounds(X[test_idx], margins)
        pred_config = EstimatorConfig(
            est_config.stream, predict_factor * est_config.M)
        pred_engine = CopulaLikelihood(model_spec, test_bounds, pred_config)
        dens = np.zeros((len(draws), len(test_idx)))
        for i, th in enumerate(draws):
            aux = pred_engine.fresh_aux(qmc.fold_seed(seed, 0xCE, k, i))
            dens[i] = np.exp(
                pred_engine.log_likelihood(th, aux).per_observation)
        p_hat = dens.mean(axis=0)
        if np.any(p_hat <= 0):
            raise ConvergenceError(f"fold {k} produced a zero predictive "
                                   f"density")
        fold_score = float(np.sum(np.log(p_hat)))
        per_fold.append(fold_score)
        total += fold_score
    return total, per_fold


# ---------------------------------------------------------------------------
# kernel density estimate
# ---------------------------------------------------------------------------

def kde(series, grid=None, n_grid=512):
    """Gaussian-kernel density with Silverman's bandwidth."""
    x = np.asarray(series, dtype=float)
    if len(x) < 30:
        raise ValueError("need at least 30 samples for a KDE")
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0:
        raise ValueError("degenerate (constant) series")
    h = 0.9 * spread * len(x) ** (-0.2)
    if grid is None:
        grid = np.linspace(x.min() - 5 * h, x.max() + 5 * h, n_grid)
    z = (grid[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(x) * h *
                                               math.sqrt(2 * math.pi))
    return grid, dens
