"""Config-driven orchestration shared by the CLI and tests: simulation,
marginal fitting, pilot/tuning, sampler or VBIL execution, diagnostics,
and artifact assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import __version__, copulas as cp, diagnostics as dg, qmc
from .da import DAConfig, da_run
from .errors import ConfigError
from .likelihood import CopulaLikelihood, EstimatorConfig, ModelSpec
from .marginals import build_dataset_bounds, fit_margin
from .samplers import PMConfig, run_pm_chain, transform_for, tune_M
from .vbil import GaussianVar, InverseGammaVar, VBILConfig, vbil_run


def check_keys(d, allowed, where):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")


def require(d, key, where):
    if key not in d:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return d[key]


# ---------------------------------------------------------------------------
# model / prior / marginals from config
# ---------------------------------------------------------------------------

def model_spec_from_config(model_cfg, J):
    check_keys(model_cfg, {"family", "prior", "factors"}, "model")
    family = require(model_cfg, "family", "model")
    return ModelSpec(family, J, int(model_cfg.get("factors", 1)))


def prior_from_config(model_cfg, spec: ModelSpec, truncate_loadings=True):
    prior_cfg = dict(require(model_cfg, "prior", "model"))
    kind = require(prior_cfg, "kind", "model.prior")
    if kind == "inverse_gamma":
        check_keys(prior_cfg, {"kind", "alpha", "beta"}, "model.prior")
        shift = 1.0 if spec.family == "gumbel" else 0.0
        prior = cp.InverseGammaPrior(prior_cfg["alpha"], prior_cfg["beta"],
                                     shift)
        return lambda th: float(prior.log_pdf(th[0]))
    if kind == "uniform":
        check_keys(prior_cfg, {"kind", "lo", "hi"}, "model.prior")
        prior = cp.UniformPrior(prior_cfg["lo"], prior_cfg["hi"])
        return lambda th: float(prior.log_pdf(th[0]))
    if kind == "normal_loadings":
        check_keys(prior_cfg, {"kind", "mu0", "var0"}, "model.prior")
        prior = cp.NormalLoadingsPrior(prior_cfg.get("mu0", 0.0),
                                       prior_cfg.get("var0", 10.0),
                                       truncate=truncate_loadings)
        return lambda th: float(prior.log_pdf_vector(th, spec.J, spec.factors))
    raise ConfigError(f"unknown prior kind {kind!r}")


def margins_from_config(marg_cfg, columns, X):
    """Per-column margin models from either a single spec or a
    default/columns mapping."""
    if "kind" in marg_cfg:
        specs = {c: marg_cfg for c in columns}
    else:
        check_keys(marg_cfg, {"default", "columns"}, "marginals")
        default = marg_cfg.get("default")
        per_col = marg_cfg.get("columns", {})
        for c in per_col:
            if c not in columns:
                raise ConfigError(f"marginals reference unknown column {c!r}")
        specs = {c: per_col.get(c, default) for c in columns}
        missing = [c for c, s in specs.items() if s is None]
        if missing:
            raise ConfigError(f"no margin spec for column(s) {missing}")
    return [fit_margin(X[:, j], specs[c]) for j, c in enumerate(columns)], \
        {c: specs[c] for c in columns}


def default_theta0(spec: ModelSpec, init_cfg):
    if init_cfg and "theta" in init_cfg:
        return np.atleast_1d(np.asarray(init_cfg["theta"], dtype=float))
    if init_cfg and "loadings" in init_cfg:
        return cp.GaussianFactorParam(
            np.asarray(init_cfg["loadings"], dtype=float)).free_vector()
    if spec.family == "clayton":
        return np.array([1.0])
    if spec.family == "gumbel":
        return np.array([1.5])
    B = np.zeros((spec.J, spec.factors))
    for i, j in cp.GaussianFactorParam.free_index_pattern(spec.J,
                                                          spec.factors):
        B[i, j] = 1.0 if i == j else 0.1
    return cp.GaussianFactorParam(B).free_vector()


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def simulate_from_config(cfg):
    check_keys(cfg, {"seed", "family", "theta", "loadings", "J", "n",
                     "marginals"}, "simulate config")
    seed = int(require(cfg, "seed", "simulate config"))
    family = require(cfg, "family", "simulate config")
    n = int(require(cfg, "n", "simulate config"))
    if family == "gaussian":
        model = cp.GaussianFactorParam(
            np.asarray(require(cfg, "loadings", "simulate config"),
                       dtype=float))
        J = model.J
        U = cp.sample_copula(model, n, seed)
    else:
        J = int(require(cfg, "J", "simulate config"))
        theta = float(require(cfg, "theta", "simulate config"))
        model = (cp.ClaytonParam(theta) if family == "clayton"
                 else cp.GumbelParam(theta))
        U = cp.sample_copula(model, n, seed, J=J)
    marg = require(cfg, "marginals", "simulate config")
    specs = [marg] * J if "kind" in marg else list(marg)
    if len(specs) != J:
        raise ConfigError("need one margin spec (or a list of J) to simulate")
    X = np.empty_like(U)
    for j, s in enumerate(specs):
        if s["kind"] == "empirical":
            raise ConfigError("cannot simulate from an empirical margin")
        if s["kind"] == "bernoulli" and "p" not in s:
            raise ConfigError("simulation margins need explicit parameters")
        if s["kind"] == "gaussian" and "mu" not in s:
            raise ConfigError("simulation margins need explicit parameters")
        X[:, j] = fit_margin(None, s).inverse(U[:, j])
    columns = [f"x{j}" for j in range(J)]
    return X, columns


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

_RUN_KEYS = {"seed", "model", "marginals", "estimator", "method", "sampler",
             "vbil", "init", "pilot"}


@dataclass
class FitResult:
    method: str
    chain: object
    summary: dict
    manifest: dict
    kde_curves: dict
    vbil_trace: object = None
    param_names: tuple = ()


def _tuned_estimator(cfg, spec, bounds, pm_config, prior_logpdf, transform,
                     theta0, seed):
    est_cfg = dict(cfg.get("estimator", {}))
    check_keys(est_cfg, {"stream", "M", "pilot_M", "dtype"}, "estimator")
    stream = est_cfg.get("stream", "rqmc")
    dtype = est_cfg.get("dtype", "float64")
    M = est_cfg.get("M", 64)
    if M != "auto":
        return EstimatorConfig(stream, int(M), dtype), None

    pilot_cfg = dict(cfg.get("pilot", {}))
    check_keys(pilot_cfg, {"M", "iterations", "burn_in"}, "pilot")
    pilot_M = int(est_cfg.get("pilot_M", pilot_cfg.get("M", 128)))
    pilot_iters = int(pilot_cfg.get("iterations", 500))
    pilot_burn = int(pilot_cfg.get("burn_in", max(1, pilot_iters // 4)))
    pilot_engine = CopulaLikelihood(spec, bounds,
                                    EstimatorConfig(stream, pilot_M))
    pilot_pm = PMConfig("standard", stream=stream, M=pilot_M,
                        iterations=pilot_iters, burn_in=pilot_burn,
                        garthwaite=spec.n_params == 1)
    pilot = run_pm_chain(pilot_engine, prior_logpdf, transform, pilot_pm,
                         qmc.fold_seed(seed, 0x91), theta0)
    theta_bar = pilot.posterior_mean()
    report = tune_M(
        lambda m: CopulaLikelihood(spec, bounds, EstimatorConfig(stream, m)),
        theta_bar, pm_config, qmc.fold_seed(seed, 0x92), pilot_M=pilot_M)
    return EstimatorConfig(stream, report.chosen_M, dtype), report


def fit_from_config(cfg, X, columns):
    check_keys(cfg, _RUN_KEYS, "run config")
    seed = int(require(cfg, "seed", "run config"))
    method = cfg.get("method", "pm")
    spec = model_spec_from_config(require(cfg, "model", "run config"),
                                  X.shape[1])
    prior_logpdf = prior_from_config(cfg["model"], spec)
    margins, margin_specs = margins_from_config(
        require(cfg, "marginals", "run config"), columns, X)
    bounds = build_dataset_bounds(X, margins)
    transform = transform_for(spec)
    theta0 = default_theta0(spec, cfg.get("init"))
    names = _param_names(spec)

    manifest = {
        "package": "pmcopula",
        "version": __version__,
        "config": cfg,
        "columns": list(columns),
        "n": int(X.shape[0]),
        "J": int(X.shape[1]),
        "margin_specs": margin_specs,
    }

    if method == "pm":
        pm_cfg = _pm_config_from(cfg)
        est_config, tuning = _tuned_estimator(
            cfg, spec, bounds, pm_cfg, prior_logpdf, transform, theta0, seed)
        if pm_cfg.M != est_config.M:
            pm_cfg = PMConfig(**{**pm_cfg.__dict__, "M": est_config.M})
        engine = CopulaLikelihood(spec, bounds, est_config)
        chain = run_pm_chain(engine, prior_logpdf, transform, pm_cfg, seed,
                             theta0)
        summary = dg.summarize_chain(chain, names)
        curves = _kde_curves(chain, names)
        manifest["tuning"] = None if tuning is None else {
            "rho_hat": tuning.rho_hat, "sigma2_opt": tuning.sigma2_opt,
            "chosen_M": tuning.chosen_M,
            "pilot_theta": tuning.pilot_theta,
            "variances": tuning.variances, "policy": tuning.policy}
        manifest["estimator_M"] = est_config.M
        summary_dict = summary.to_dict()
        summary_dict["acceptance_rate"] = chain.acceptance_rate
        return FitResult("pm", chain, summary_dict, manifest, curves,
                         param_names=names)

    if method == "da":
        s_cfg = dict(cfg.get("sampler", {}))
        check_keys(s_cfg, {"iterations", "burn_in", "thinning", "garthwaite",
                           "variant"}, "sampler")
        da_cfg = DAConfig(int(s_cfg.get("iterations", 15000)),
                          int(s_cfg.get("burn_in", 5000)),
                          int(s_cfg.get("thinning", 1)),
                          bool(s_cfg.get("garthwaite", True)))
        chain = da_run(bounds, spec, prior_logpdf, transform, da_cfg, seed,
                       theta0)
        summary = dg.summarize_chain(chain, names)
        summary_dict = summary.to_dict()
        summary_dict["acceptance_rate"] = chain.acceptance_rate
        return FitResult("da", chain, summary_dict, manifest,
                         _kde_curves(chain, names), param_names=names)

    if method == "vbil":
        v_cfg = dict(cfg.get("vbil", {}))
        check_keys(v_cfg, {"S", "lr0", "tau", "window", "tol",
                           "max_iterations", "M", "stream", "init"}, "vbil")
        if spec.family == "gaussian":
            prior_logpdf = prior_from_config(cfg["model"], spec,
                                             truncate_loadings=False)
        est = EstimatorConfig(v_cfg.get("stream",
                                        cfg.get("estimator", {}).get(
                                            "stream", "rqmc")),
                              int(v_cfg.get("M", cfg.get("estimator", {}).get(
                                  "M", 64))))
        engine = CopulaLikelihood(spec, bounds, est)
        vb_config = VBILConfig(S=int(v_cfg.get("S", 64)),
                               lr0=float(v_cfg.get("lr0", 1.0)),
                               tau=float(v_cfg.get("tau", 10.0)),
                               window=int(v_cfg.get("window", 5)),
                               tol=float(v_cfg.get("tol", 1e-4)),
                               max_iterations=int(v_cfg.get("max_iterations",
                                                            200)),
                               seed=seed)
        var, trace, post = run_vbil_for(spec, engine, prior_logpdf, vb_config,
                                        init=v_cfg.get("init"))
        summary_dict = {
            "variational": post,
            "lb_per_obs": trace.lb_per_obs[-1] if trace.lb_per_obs else None,
            "lb_full": trace.lb_full[-1] if trace.lb_full else None,
            "iterations": trace.iterations,
            "converged": trace.converged,
        }
        manifest["variational_params"] = post
        return FitResult("vbil", None, summary_dict, manifest, {},
                         vbil_trace=trace, param_names=names)

    raise ConfigError(f"unknown method {method!r}")


def run_vbil_for(spec, engine, prior_logpdf, vb_config, init=None):
    """Family-appropriate variational run over the estimated posterior."""
    def log_h(thetas, it_seed):
        aux = engine.fresh_aux(it_seed)
        uniforms = engine.materialize(aux)
        out = np.empty(len(thetas))
        for i, th in enumerate(np.atleast_2d(thetas)):
            lp = prior_logpdf(np.atleast_1d(th))
            if lp == -math.inf:
                out[i] = -math.inf
                continue
            est = engine.log_likelihood(np.atleast_1d(th), aux,
                                        uniforms=uniforms)
            out[i] = est.log_total + lp
        return out

    if spec.family in ("clayton", "gumbel"):
        shift = 1.0 if spec.family == "gumbel" else 0.0
        a0, b0 = (2.0, 1.0) if init is None else (init["a"], init["b"])
        var0 = InverseGammaVar(a0, b0, shift)
        var, trace = vbil_run(var0, lambda th, s: log_h(
            np.asarray(th).reshape(-1, 1), s), engine.n, vb_config)
        post = {"family": "inverse_gamma", "a": var.a, "b": var.b,
                "shift": var.shift, "mean": var.mean(), "sd": var.sd()}
        return var, trace, post

    d = spec.n_params
    if init is None:
        mu0 = default_theta0(spec, None)
        var0 = GaussianVar.from_mu_sigma(mu0, 0.1 * np.eye(d))
    else:
        var0 = GaussianVar.from_mu_sigma(np.asarray(init["mu"], dtype=float),
                                         np.asarray(init["sigma"],
                                                    dtype=float))
    # the loading prior is evaluated untruncated inside VB; signs are
    # normalized at reporting time (Sigma is invariant to column flips)
    var, trace = vbil_run(var0, log_h, engine.n, vb_config)
    mu, sigma = var.mu_sigma()
    B = cp.GaussianFactorParam.free_index_pattern(spec.J, spec.factors)
    for col in range(spec.factors):
        diag_pos = B.index((col, col))
        if mu[diag_pos] < 0:
            flip = [i for i, (r, c) in enumerate(B) if c == col]
            mu[flip] = -mu[flip]
    post = {"family": "gaussian", "mu": mu, "sigma_diag": np.diag(sigma),
            "mean": mu}
    return var, trace, post


def _pm_config_from(cfg):
    s_cfg = dict(cfg.get("sampler", {}))
    check_keys(s_cfg, {"variant", "iterations", "burn_in", "thinning", "phi",
                       "depth", "refresh_prob", "blocks", "garthwaite"},
               "sampler")
    est = dict(cfg.get("estimator", {}))
    stream = est.get("stream", "rqmc")
    M = est.get("M", 64)
    depth = s_cfg.get("depth", 8)
    if depth in ("inf", "infinity"):
        depth = math.inf
    return PMConfig(
        variant=s_cfg.get("variant", "block"),
        stream=stream,
        M=64 if M == "auto" else int(M),
        iterations=int(s_cfg.get("iterations", 15000)),
        burn_in=int(s_cfg.get("burn_in", 5000)),
        thinning=int(s_cfg.get("thinning", 1)),
        phi=float(s_cfg.get("phi", 0.99)),
        depth=depth,
        refresh_prob=float(s_cfg.get("refresh_prob", 0.05)),
        blocks=int(s_cfg.get("blocks", 100)),
        garthwaite=bool(s_cfg.get("garthwaite", False)),
    )


def _param_names(spec: ModelSpec):
    if spec.family != "gaussian":
        return ("theta",)
    return tuple(f"b_{i}_{j}" for i, j in
                 cp.GaussianFactorParam.free_index_pattern(spec.J,
                                                           spec.factors))


def _kde_curves(chain, names):
    curves = {}
    for i, name in enumerate(names):
        try:
            grid, dens = dg.kde(chain.draws[:, i])
            curves[name] = (grid, dens)
        except ValueError:
            continue
    return curves


# ---------------------------------------------------------------------------
# variance study / compare configs
# ---------------------------------------------------------------------------

def variance_study_from_config(cfg, X, columns, threads=1):
    check_keys(cfg, {"seed", "model", "marginals", "theta", "m_grid",
                     "streams", "reps", "dtype"}, "variance-study config")
    seed = int(require(cfg, "seed", "variance-study config"))
    spec = model_spec_from_config(require(cfg, "model", "config"), X.shape[1])
    margins, _ = margins_from_config(require(cfg, "marginals", "config"),
                                     columns, X)
    bounds = build_dataset_bounds(X, margins)
    theta = np.atleast_1d(np.asarray(require(cfg, "theta", "config"),
                                     dtype=float))
    m_grid = [int(m) for m in cfg.get("m_grid", [256, 512, 1024, 2048])]
    streams = list(cfg.get("streams", ["rqmc", "mc"]))
    reps = int(cfg.get("reps", 50))
    dtype = cfg.get("dtype", "float64")
    cells = dg.loglik_variance_study(
        lambda M, stream: CopulaLikelihood(spec, bounds,
                                           EstimatorConfig(stream, M, dtype)),
        theta, m_grid, streams, reps, seed, threads=threads)
    return cells
