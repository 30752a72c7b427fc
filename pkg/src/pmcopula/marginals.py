"""Marginal models mapping observations to unit-cube coordinates.

Discrete margins provide the rectangle (F(x-), F(x)]; continuous
margins provide the point value F(x) and a log density. The empirical
continuous CDF uses the n/(n+1) rescaling so u stays inside (0,1);
empirical margins carry no density model, so their log-density
contribution is the zero constant (it cancels in every comparison the
package makes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import DataError


@dataclass(frozen=True)
class BernoulliMargin:
    p: float
    discrete = True

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise DataError(f"Bernoulli p={self.p} outside (0,1)")

    @classmethod
    def fit(cls, column):
        return cls(float(np.mean(column)))

    def bounds(self, x):
        x = np.asarray(x)
        if np.any((x != 0) & (x != 1)):
            raise DataError("Bernoulli margin saw a value outside {0,1}")
        a = np.where(x == 0, 0.0, 1.0 - self.p)
        b = np.where(x == 0, 1.0 - self.p, 1.0)
        return a, b

    def inverse(self, u):
        return (np.asarray(u) > 1.0 - self.p).astype(float)


@dataclass(frozen=True)
class EmpiricalMargin:
    """Step-function CDF of the observed sample."""

    values: np.ndarray
    discrete: bool = True

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", v)
        v.setflags(write=False)

    @classmethod
    def fit(cls, column, discrete=True):
        return cls(np.asarray(column, dtype=float), discrete)

    def bounds(self, x):
        """Discrete rectangle (count(<x)/n, count(<=x)/n]."""
        x = np.asarray(x, dtype=float)
        n = len(self.values)
        a = np.searchsorted(self.values, x, side="left") / n
        b = np.searchsorted(self.values, x, side="right") / n
        if np.any(a >= b):
            raise DataError("value outside the empirical margin support")
        return a, b

    def point(self, x):
        """Continuous u = rank/(n+1), strictly inside (0,1)."""
        n = len(self.values)
        u = np.searchsorted(self.values, np.asarray(x, dtype=float),
                            side="right") / (n + 1.0)
        if np.any(u <= 0):
            raise DataError("value below the empirical margin support")
        return u, np.zeros_like(u)

    def inverse(self, u):
        n = len(self.values)
        idx = np.minimum((np.asarray(u) * n).astype(int), n - 1)
        return self.values[idx]


@dataclass(frozen=True)
class GaussianMargin:
    mu: float
    sigma: float
    discrete = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise DataError("Gaussian margin needs sigma > 0")

    @classmethod
    def fit(cls, column):
        col = np.asarray(column, dtype=float)
        return cls(float(col.mean()), float(col.std(ddof=1)))

    def point(self, x):
        x = np.asarray(x, dtype=float)
        u = norm.cdf(x, self.mu, self.sigma)
        if np.any((u <= 0) | (u >= 1)):
            raise DataError("Gaussian margin CDF hit 0/1 (misfit)")
        return u, norm.logpdf(x, self.mu, self.sigma)

    def inverse(self, u):
        return norm.ppf(np.asarray(u), self.mu, self.sigma)


def fit_margin(column, spec):
    """Build a margin from a config spec dict; fitted unless fixed."""
    kind = spec.get("kind")
    if kind == "bernoulli":
        return BernoulliMargin(spec["p"]) if "p" in spec \
            else BernoulliMargin.fit(column)
    if kind == "empirical":
        return EmpiricalMargin.fit(column, discrete=spec.get("discrete", True))
    if kind == "gaussian":
        if "mu" in spec or "sigma" in spec:
            return GaussianMargin(spec["mu"], spec["sigma"])
        return GaussianMargin.fit(column)
    if kind == "fixed":
        inner = dict(spec)
        inner["kind"] = spec["dist"]
        del inner["dist"]
        if inner["kind"] == "bernoulli" and "p" not in inner:
            raise DataError("fixed margin requires explicit parameters")
        return fit_margin(None, inner)
    raise DataError(f"unknown margin kind {kind!r}")


@dataclass(frozen=True)
class ObservationBounds:
    """Unit-cube rectangle/point data for one observation."""

    a: np.ndarray
    b: np.ndarray
    u: np.ndarray
    log_f: np.ndarray
    discrete: np.ndarray

    def __post_init__(self):
        # a == b is tolerated here (estimators return 0 for degenerate
        # rectangles); data-derived bounds are strict via the margins
        d = self.discrete
        if np.any((self.a[d] < 0) | (self.a[d] > self.b[d])
                  | (self.b[d] > 1)):
            raise DataError("discrete bounds must satisfy 0 <= a <= b <= 1")
        c = ~d
        if np.any((self.u[c] <= 0) | (self.u[c] >= 1)):
            raise DataError("continuous margin value outside (0,1)")


def bounds_from_data(x, margins) -> ObservationBounds:
    """Map one observation row through its fitted marginal models."""
    J = len(margins)
    a = np.zeros(J)
    b = np.ones(J)
    u = np.full(J, np.nan)
    log_f = np.zeros(J)
    discrete = np.array([m.discrete for m in margins])
    for j, m in enumerate(margins):
        if m.discrete:
            aj, bj = m.bounds(np.asarray([x[j]]))
            a[j], b[j] = aj[0], bj[0]
        else:
            uj, lf = m.point(np.asarray([x[j]]))
            u[j], log_f[j] = uj[0], lf[0]
    return ObservationBounds(a, b, u, log_f, discrete)


@dataclass(frozen=True)
class DatasetBounds:
    """Column-vectorized bounds for a whole dataset.

    For continuous margins the a/b slots hold the point value so the
    estimator can treat every column uniformly.
    """

    a: np.ndarray          # (n, J)
    b: np.ndarray          # (n, J)
    u: np.ndarray          # (n, J), NaN on discrete columns
    log_f: np.ndarray      # (n, J), 0 on discrete columns
    discrete: np.ndarray   # (J,)

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def J(self):
        return self.a.shape[1]

    def row(self, t) -> ObservationBounds:
        return ObservationBounds(self.a[t], self.b[t], self.u[t],
                                 self.log_f[t], self.discrete)


def build_dataset_bounds(X, margins) -> DatasetBounds:
    """Vectorized bounds_from_data over all rows."""
    X = np.asarray(X, dtype=float)
    n, J = X.shape
    if J != len(margins):
        raise DataError("margin count does not match data width")
    a = np.zeros((n, J))
    b = np.ones((n, J))
    u = np.full((n, J), np.nan)
    log_f = np.zeros((n, J))
    discrete = np.array([m.discrete for m in margins])
    for j, m in enumerate(margins):
        if m.discrete:
            a[:, j], b[:, j] = m.bounds(X[:, j])
        else:
            u[:, j], log_f[:, j] = m.point(X[:, j])
            a[:, j] = b[:, j] = u[:, j]
    return DatasetBounds(a, b, u, log_f, discrete)
