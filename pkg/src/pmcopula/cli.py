"""Command-line driver.

Subcommands: simulate, fit, variance-study, compare, lpds. Configs are
JSON (strictly validated, unknown keys rejected), data is headered CSV,
and every numeric output is a pure function of (config, data, seeds).
Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure,
5 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import chainio as io_
from . import diagnostics as dg
from . import pipeline as pl
from .errors import ConfigError, ConvergenceError, DataError, NumericalError


def _load_config(path, override_seed=None):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if override_seed is not None:
        cfg["seed"] = int(override_seed)
    if "seed" not in cfg:
        raise ConfigError("seeds are mandatory: set \"seed\" in the config "
                          "or pass --seed")
    return cfg


def _load_data(path):
    if path is None:
        raise DataError("this command requires --data PATH")
    try:
        return io_.read_data_csv(path)
    except FileNotFoundError as exc:
        raise DataError(f"data file not found: {path}") from exc


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _base_manifest(args, cfg, data_path=None):
    man = {"command": args.command, "config": cfg}
    if data_path:
        man["data"] = {"path": os.path.abspath(data_path),
                       "sha256": io_.sha256_file(data_path)}
    return man


def cmd_simulate(args):
    cfg = _load_config(args.config, args.seed)
    X, columns = pl.simulate_from_config(cfg)
    out = _outdir(args)
    data_path = os.path.join(out, "data.csv")
    io_.write_data_csv(data_path, X, columns)
    man = _base_manifest(args, cfg)
    man["data"] = {"path": os.path.abspath(data_path),
                   "sha256": io_.sha256_file(data_path),
                   "n": X.shape[0], "J": X.shape[1]}
    io_.write_json(os.path.join(out, "manifest.json"), man)
    print(f"wrote {data_path} ({X.shape[0]} x {X.shape[1]})")
    return 0


def _run_fit(cfg, data_path):
    header, X = _load_data(data_path)
    return pl.fit_from_config(cfg, X, header), header


def _write_fit_artifacts(out, fit, args, cfg, data_path):
    man = fit.manifest
    man.update(_base_manifest(args, cfg, data_path))
    if fit.method in ("pm", "da"):
        io_.write_chain_csv(os.path.join(out, "chain.csv"), fit.chain,
                            fit.param_names)
        io_.write_kde_csv(os.path.join(out, "kde.csv"), fit.kde_curves)
    if fit.method == "vbil":
        lam_names = [f"lambda_{i}" for i in
                     range(len(fit.vbil_trace.params[0]))] \
            if fit.vbil_trace.params else []
        io_.write_vbil_trace_csv(os.path.join(out, "vbil_trace.csv"),
                                 fit.vbil_trace, lam_names)
    io_.write_json(os.path.join(out, "summary.json"), fit.summary)
    io_.write_json(os.path.join(out, "manifest.json"), man)


def cmd_fit(args):
    cfg = _load_config(args.config, args.seed)
    fit, _ = _run_fit(cfg, args.data)
    out = _outdir(args)
    _write_fit_artifacts(out, fit, args, cfg, args.data)
    print(f"fit written to {out} (method={fit.method})")
    return 0


def cmd_variance_study(args):
    cfg = _load_config(args.config, args.seed)
    header, X = _load_data(args.data)
    cells = pl.variance_study_from_config(cfg, X, header,
                                          threads=args.threads or 1)
    out = _outdir(args)
    io_.write_variance_csv(os.path.join(out, "variance_table.csv"), cells)
    io_.write_json(os.path.join(out, "manifest.json"),
                   _base_manifest(args, cfg, args.data))
    print(f"variance table written to {out}")
    return 0


def cmd_compare(args):
    cfg_a = _load_config(args.config, args.seed)
    cfg_b = _load_config(args.config_b, args.seed)
    fit_a, _ = _run_fit(cfg_a, args.data)
    fit_b, _ = _run_fit(cfg_b, args.data)
    report = {
        "a": {"summary": fit_a.summary, "manifest": fit_a.manifest},
        "b": {"summary": fit_b.summary, "manifest": fit_b.manifest},
    }
    tnv_a = fit_a.summary.get("tnv")
    tnv_b = fit_b.summary.get("tnv")
    if tnv_a and tnv_b:
        report["rel_tnv_a_over_b"] = tnv_a / tnv_b
    out = _outdir(args)
    io_.write_json(os.path.join(out, "comparison.json"), report)
    print(f"comparison written to {out}")
    return 0


def cmd_lpds(args):
    cfg = _load_config(args.config, args.seed)
    header, X = _load_data(args.data)
    pl.check_keys(cfg, pl._RUN_KEYS | {"lpds"}, "run config")
    spec = pl.model_spec_from_config(cfg["model"], X.shape[1])
    prior_logpdf = pl.prior_from_config(cfg["model"], spec)
    from .samplers import transform_for
    transform = transform_for(spec)
    _, margin_specs = pl.margins_from_config(cfg["marginals"], header, X)
    pm_cfg = pl._pm_config_from(cfg)
    est = cfg.get("estimator", {})
    from .likelihood import EstimatorConfig
    est_config = EstimatorConfig(est.get("stream", "rqmc"),
                                 int(est.get("M", 64)))
    lp_cfg = dict(cfg.get("lpds", {}))
    pl.check_keys(lp_cfg, {"folds", "predict_factor"}, "lpds")
    theta0 = pl.default_theta0(spec, cfg.get("init"))
    total, per_fold = dg.lpds(
        X, [margin_specs[c] for c in header], spec, prior_logpdf, transform,
        pm_cfg, est_config, int(cfg["seed"]), theta0,
        folds=int(args.folds or lp_cfg.get("folds", 5)),
        predict_factor=int(lp_cfg.get("predict_factor", 4)))
    out = _outdir(args)
    io_.atomic_write(os.path.join(out, "lpds_folds.csv"),
                     "fold,score\n" + "".join(
                         f"{k},{io_.fmt(s)}\n" for k, s in
                         enumerate(per_fold)))
    io_.write_json(os.path.join(out, "lpds.json"),
                   {"lpds": total, "per_fold": per_fold,
                    **_base_manifest(args, cfg, args.data)})
    print(f"LPDS = {total:.4f} written to {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="pmcopula",
        description="Bayesian copula estimation with unbiased likelihood "
                    "estimates (pseudo-marginal MCMC, VBIL, DA baseline)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", required=True, help="JSON config path")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap the BLAS worker pool")
        if data:
            sp.add_argument("--data", help="headered CSV data path")

    sp = sub.add_parser("simulate", help="synthesize a dataset")
    common(sp, data=False)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("fit", help="fit a copula model (pm, vbil, or da)")
    common(sp)
    sp.set_defaults(fn=cmd_fit)

    sp = sub.add_parser("variance-study",
                        help="variance of log Lhat over an (M, stream) grid")
    common(sp)
    sp.set_defaults(fn=cmd_variance_study)

    sp = sub.add_parser("compare", help="run two configs and compare TNV")
    common(sp)
    sp.add_argument("--config-b", required=True,
                    help="JSON config path for the second method")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("lpds", help="k-fold cross-validated log predictive "
                                     "density")
    common(sp)
    sp.add_argument("--folds", type=int, default=None)
    sp.set_defaults(fn=cmd_lpds)
    return p


def _cap_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    _cap_threads(getattr(args, "threads", None))
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
