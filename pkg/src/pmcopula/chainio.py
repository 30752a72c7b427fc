"""Artifact writers: chain CSV, manifests, summaries, KDE and variance
tables. All writes are atomic (temp file + rename) and floats print
with 17 significant digits for textual bit-stability."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os

import numpy as np


def fmt(x):
    return f"{float(x):.17g}"


def atomic_write(path, text):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_chain_csv(path, result, names):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["iteration", *names, "log_like", "accept"])
    for it in range(len(result.thetas)):
        w.writerow([it, *(fmt(v) for v in result.thetas[it]),
                    fmt(result.log_likes[it]), int(result.accepts[it])])
    atomic_write(path, buf.getvalue())


def read_chain_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    data = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return head, data


def write_kde_csv(path, curves):
    """curves: {param_name: (grid, density)} in long format."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["parameter", "grid", "density"])
    for name, (grid, dens) in curves.items():
        for g, d in zip(grid, dens):
            w.writerow([name, fmt(g), fmt(d)])
    atomic_write(path, buf.getvalue())


def write_variance_csv(path, cells):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["M", "stream", "variance", "zero_estimates", "reps"])
    for c in cells:
        w.writerow([c["M"], c["stream"], fmt(c["variance"]),
                    c["zero_estimates"], c["reps"]])
    atomic_write(path, buf.getvalue())


def write_vbil_trace_csv(path, trace, param_names):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["iteration", *param_names, "lb_full", "lb_per_obs",
                "grad_norm"])
    for t in range(trace.iterations):
        w.writerow([t, *(fmt(v) for v in trace.params[t]),
                    fmt(trace.lb_full[t]), fmt(trace.lb_per_obs[t]),
                    fmt(trace.grad_norm[t])])
    atomic_write(path, buf.getvalue())


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path, obj):
    atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True,
                                  allow_nan=True) + "\n")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_data_csv(path, X, columns):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(columns)
    for row in np.asarray(X):
        w.writerow([fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def read_data_csv(path):
    from .errors import DataError
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError("data file needs a header and at least one row")
    header = rows[0]
    try:
        X = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"non-numeric value in data file: {exc}") from exc
    if np.any(~np.isfinite(X)):
        raise DataError("missing or non-finite values are not supported")
    return header, X
