"""Gaussian EMOS baseline fit by minimum CRPS.

The predictive law is ``N(a + sum_e b_e xbar_e, c + d S^2)`` where xbar_e
is the mean of source e and S^2 the variance of all members pooled.  One
coefficient per source keeps exchangeable members on an equal footing.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.optimize import minimize

from .core import (Dataset, ForecastCase, Layout, NumericalError, SourceSpec,
                   ValidationError, case_to_row)
from .verification import crps_gaussian

_TINY = np.finfo(float).tiny


class EmosFitError(NumericalError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True, eq=False)
class EmosParams:
    a: float
    b: np.ndarray
    c: float
    d: float

    def __post_init__(self):
        b = np.array(self.b, dtype=float).reshape(-1)
        b.setflags(write=False)
        object.__setattr__(self, "b", b)
        if not (self.c >= 0 and self.d >= 0):
            raise ValidationError(f"EMOS needs c, d >= 0, got c={self.c}, d={self.d}")
        if not np.all(np.isfinite(np.r_[self.a, b, self.c, self.d])):
            raise ValidationError("EMOS parameters must be finite")

    def __eq__(self, other):
        return (isinstance(other, EmosParams) and self.a == other.a
                and np.array_equal(self.b, other.b) and self.c == other.c
                and self.d == other.d)

    def to_dict(self) -> dict:
        return {"model": "emos", "a": float(self.a), "b": self.b.tolist(),
                "c": float(self.c), "d": float(self.d)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EmosParams":
        try:
            return cls(float(d["a"]), d["b"], float(d["c"]), float(d["d"]))
        except KeyError as exc:
            raise ValidationError(f"missing EMOS field {exc}") from None


@dataclass(frozen=True)
class EmosConfig:
    max_iterations: int = 20000
    xatol: float = 1e-8
    fatol: float = 1e-12


def _features(members, layout):
    """Source means (n, E) and pooled member variance (n,)."""
    X = np.atleast_2d(members)
    ind = layout.indicator[1:, 1:]
    xbar = (X @ ind) / layout.counts[1:]
    return xbar, np.var(X, axis=1)


def _unpack(theta, E):
    return theta[0], theta[1:E + 1], theta[E + 1] ** 2, theta[E + 2] ** 2


def _mean_crps(theta, xbar, s2, y):
    a, b, c, d = _unpack(theta, xbar.shape[1])
    return float(np.mean(crps_gaussian(a + xbar @ b, np.sqrt(c + d * s2), y)))


def fit_emos(data: Dataset, cfg: EmosConfig = EmosConfig()) -> EmosParams:
    """Minimum mean-CRPS fit by Nelder-Mead, started from least squares.

    c and d are searched through their square roots so they stay >= 0.
    """
    data.require_observations()
    n = len(data)
    if n < 10:
        raise ValidationError(f"EMOS needs at least 10 training cases, got {n}")
    y = data.observations
    xbar, s2 = _features(data.members, data.layout)
    E = xbar.shape[1]
    design = np.column_stack([np.ones(n), xbar])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid_var = float(np.var(y - design @ coef))
    theta0 = np.concatenate([coef, [math.sqrt(0.5 * resid_var),
                                     math.sqrt(0.5 * resid_var / max(s2.mean(), 1e-12))]])
    opts = {"maxiter": cfg.max_iterations, "maxfev": 2 * cfg.max_iterations,
            "xatol": cfg.xatol, "fatol": cfg.fatol, "adaptive": True}
    best = minimize(_mean_crps, theta0, args=(xbar, s2, y), method="Nelder-Mead",
                    options=opts)
    for _ in range(4):
        res = minimize(_mean_crps, best.x, args=(xbar, s2, y), method="Nelder-Mead",
                       options=opts)
        improved = best.fun - res.fun
        if res.fun <= best.fun:
            best = res
        if improved < cfg.fatol:
            break
    if not np.isfinite(best.fun):
        raise EmosFitError("EMOS fit failed", best=best.x)
    if not best.success:
        raise EmosFitError(f"EMOS optimiser did not converge: {best.message}",
                           best=best.x)
    a, b, c, d = _unpack(best.x, E)
    return EmosParams(float(a), b, float(c), float(d))


def predict_emos_batch(params: EmosParams, data: Dataset):
    """Predictive mean and standard deviation for every case of ``data``."""
    if params.b.size != data.n_sources:
        raise ValidationError(f"EMOS parameters cover {params.b.size} sources, "
                              f"data has {data.n_sources}")
    xbar, s2 = _features(data.members, data.layout)
    mu = params.a + xbar @ params.b
    sigma = np.sqrt(params.c + params.d * s2)
    if np.any(sigma == 0):
        warnings.warn("zero EMOS spread replaced by the smallest positive float",
                      RuntimeWarning, stacklevel=2)
        sigma = np.maximum(sigma, _TINY)
    return mu, sigma


def predict_emos(params: EmosParams, predictors: ForecastCase, schema=None):
    """``(mu, sigma)`` of the Gaussian predictive for one case.

    ``schema`` defaults to the sources present in ``predictors``, ordered by
    id, each with as many members as given.
    """
    if schema is None:
        schema = [SourceSpec(sid, np.asarray(v).size)
                  for sid, v in sorted(predictors.members.items()) if sid != 0]
    layout = Layout(schema)
    row = case_to_row(predictors, layout)
    data = Dataset(layout.schema, [predictors.time_index], row[None, :], [np.nan])
    mu, sigma = predict_emos_batch(params, data)
    return float(mu[0]), float(sigma[0])
