"""Exact EM inference and Student predictive for the Gamma-Normal model.

Model, for every source e (e = 0 is the observation) and member k::

    omega_t^-2          ~ Gamma(alpha, rate=beta)
    Z_t | omega_t       ~ N(0, lam * omega_t^2)
    X_ekt | Z_t, omega  ~ N(a_e + b_e Z_t, c_e^2 omega_t^2)

with b_0 = c_0 = 1.  Given the members of one case the pair
(Z_t, omega_t^-2) has a normal-gamma posterior, so both the E-step and the
predictive distribution are available in closed form.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import digamma, gammaln

from .core import (Dataset, ForecastCase, GammaNormalParams, Layout,
                   NumericalError, SchemaError, SourceSpec, ValidationError)

LOG_2PI = math.log(2 * math.pi)


class InitializationError(NumericalError):
    pass


class SolverError(NumericalError):
    pass


@dataclass(frozen=True)
class EMConfig:
    epsilon: float = 1e-6
    max_iterations: int = 500
    alpha_solver_tolerance: float = 1e-10
    alpha_bounds: tuple = (1e-3, 1e3)

    def __post_init__(self):
        lo, hi = self.alpha_bounds
        if not (self.epsilon > 0 and self.max_iterations >= 1 and 0 < lo < hi):
            raise ValidationError(f"invalid EM configuration {self}")


@dataclass
class FitTrace:
    """Parameter path of an (S)EM run.

    ``loglik[h]`` is the log-likelihood at ``thetas[h]``.  For SEM runs it is
    the log-likelihood of the simulated complete data, which need not be
    monotone.
    """

    names: list
    thetas: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    termination: str = ""

    def append(self, params: GammaNormalParams, ll: float):
        self.thetas.append(params.as_vector())
        self.loglik.append(float(ll))

    @property
    def n_iterations(self) -> int:
        return max(len(self.thetas) - 1, 0)

    def theta_matrix(self) -> np.ndarray:
        return np.array(self.thetas)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loglik"] + list(self.names))
            for h, (theta, ll) in enumerate(zip(self.thetas, self.loglik)):
                w.writerow([h, repr(ll)] + [repr(float(v)) for v in theta])


@dataclass(frozen=True)
class PosteriorNG:
    """Normal-gamma posterior of (Z_t, omega_t^-2) for one case."""

    m_prime: float
    lambda_prime: float
    alpha_prime: float
    beta_prime: float

    @property
    def moments(self) -> dict:
        prec = self.alpha_prime / self.beta_prime
        return {
            "E_log_prec": digamma(self.alpha_prime) - math.log(self.beta_prime),
            "E_prec": prec,
            "E_z2_prec": self.lambda_prime + self.m_prime ** 2 * prec,
            "E_z_prec": self.m_prime * prec,
        }


@dataclass(frozen=True)
class PosteriorBatch:
    """Posteriors of many cases sharing lambda' and alpha'."""

    m_prime: np.ndarray
    lambda_prime: float
    alpha_prime: float
    beta_prime: np.ndarray

    def __len__(self):
        return self.m_prime.size

    def __getitem__(self, i) -> PosteriorNG:
        return PosteriorNG(float(self.m_prime[i]), self.lambda_prime,
                           self.alpha_prime, float(self.beta_prime[i]))

    @property
    def E_prec(self):
        return self.alpha_prime / self.beta_prime

    @property
    def E_log_prec(self):
        return digamma(self.alpha_prime) - np.log(self.beta_prime)

    @property
    def E_z2_prec(self):
        return self.lambda_prime + self.m_prime ** 2 * self.E_prec

    @property
    def E_z_prec(self):
        return self.m_prime * self.E_prec

    @classmethod
    def from_list(cls, posts: Sequence[PosteriorNG]) -> "PosteriorBatch":
        lam = {p.lambda_prime for p in posts}
        alp = {p.alpha_prime for p in posts}
        if len(lam) != 1 or len(alp) != 1:
            raise ValidationError("posteriors must share lambda' and alpha'")
        return cls(np.array([p.m_prime for p in posts]), lam.pop(), alp.pop(),
                   np.array([p.beta_prime for p in posts]))


@dataclass(frozen=True)
class StudentPredictive:
    location: float
    scale: float
    dof: float

    @property
    def dist(self):
        return stats.t(self.dof, loc=self.location, scale=self.scale)

    def mean(self) -> float:
        return self.location if self.dof > 1 else float("nan")

    def variance(self) -> float:
        if self.dof <= 2:
            return float("inf")
        return self.scale ** 2 * self.dof / (self.dof - 2)

    def pdf(self, y):
        return self.dist.pdf(y)

    def cdf(self, y):
        return self.dist.cdf(y)

    def ppf(self, q):
        return self.dist.ppf(q)

    def sample(self, size, rng):
        return self.location + self.scale * rng.standard_t(self.dof, size=size)


# ---------------------------------------------------------------------------
# conjugate posterior on arrays
# ---------------------------------------------------------------------------

def _posterior(V, layout, a, b, c, alpha, beta, lam) -> PosteriorBatch:
    """Normal-gamma posterior for every row of ``V``.

    ``layout`` supplies ``counts``, ``source_of_col`` and ``indicator``; the
    vectors ``a``, ``b``, ``c`` are indexed by the sources of that layout.
    """
    V = np.atleast_2d(V)
    src = layout.source_of_col
    inv_c2 = 1.0 / c ** 2
    lam_p = 1.0 / (np.sum(layout.counts * b ** 2 * inv_c2) + 1.0 / lam)
    R = V - a[src]
    sums = R @ layout.indicator                     # K_e (xbar_e - a_e)
    m = lam_p * (sums @ (b * inv_c2))
    # sum c^-2 (x - a - b m)^2 + m^2/lam equals the textbook
    # sum c^-2 (x - a)^2 - m^2/lam' and stays positive under rounding
    resid = R - m[:, None] * b[src]
    quad = (resid ** 2) @ inv_c2[src] + m ** 2 / lam
    beta_p = beta + 0.5 * quad
    alpha_p = alpha + 0.5 * layout.n_cols
    if not np.all(beta_p > 0):
        raise AssertionError("non-positive posterior rate beta'")
    return PosteriorBatch(m, float(lam_p), float(alpha_p), beta_p)


def posterior_full(V, layout: Layout, params: GammaNormalParams) -> PosteriorBatch:
    """Posterior given observation and members (``V`` from ``full_matrix``)."""
    return _posterior(V, layout, params.a, params.b_full, params.c_full,
                      params.alpha, params.beta, params.lam)


def posterior_predictors(X, layout: Layout, params: GammaNormalParams) -> PosteriorBatch:
    """Posterior given the predictor members only (observation left out)."""
    return _posterior(X, layout.predictor_layout(), params.a[1:], params.b,
                      params.c, params.alpha, params.beta, params.lam)


def _marginal_loglik(post: PosteriorBatch, layout, c, alpha, beta, lam):
    n_cols = layout.n_cols
    return (-0.5 * n_cols * LOG_2PI - np.sum(layout.counts * np.log(c))
            + 0.5 * math.log(post.lambda_prime / lam) + alpha * math.log(beta)
            - post.alpha_prime * np.log(post.beta_prime)
            + gammaln(post.alpha_prime) - gammaln(alpha))


def _check_layout(layout: Layout, params: GammaNormalParams):
    if params.n_sources != layout.n_sources:
        raise SchemaError(f"parameters describe {params.n_sources} sources, "
                          f"data has {layout.n_sources}")


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _case_layout(case: ForecastCase):
    ids = sorted(sid for sid in case.members if sid != 0)
    schema = [SourceSpec(sid, np.asarray(case.members[sid]).size) for sid in ids]
    layout = Layout(schema)
    row = np.concatenate([np.asarray(case.members[sid], float).reshape(-1)
                          for sid in ids])
    return layout, row


def e_step(case: ForecastCase, params: GammaNormalParams) -> PosteriorNG:
    """Posterior of (Z_t, omega_t^-2) given all members and the observation."""
    if case.observation is None:
        raise ValidationError(f"time {case.time_index}: e_step needs an observation")
    layout, row = _case_layout(case)
    _check_layout(layout, params)
    V = np.concatenate([[case.observation], row])[None, :]
    return posterior_full(V, layout, params)[0]


def e_step_batch(data: Dataset, params: GammaNormalParams) -> PosteriorBatch:
    data.require_observations()
    _check_layout(data.layout, params)
    return posterior_full(data.full_matrix(), data.layout, params)


def solve_alpha(log_ratio_coefficient: float, rhs: float,
                cfg: EMConfig = EMConfig()) -> float:
    """Solve ``log(coef * alpha) - digamma(alpha) = rhs`` by bisection.

    The left-hand side decreases strictly in alpha, so the root is unique
    whenever ``rhs`` lies between its values at the two ends of
    ``cfg.alpha_bounds``.
    """
    coef = float(log_ratio_coefficient)
    if not (coef > 0 and math.isfinite(rhs)):
        raise SolverError(f"bad alpha equation: coef={coef}, rhs={rhs}")
    lo, hi = cfg.alpha_bounds

    def g(x):
        return math.log(coef * x) - float(digamma(x))

    g_lo, g_hi = g(lo), g(hi)
    if not (g_hi <= rhs <= g_lo):
        raise SolverError(f"alpha equation rhs={rhs} outside "
                          f"[{g_hi}, {g_lo}] over bounds {cfg.alpha_bounds}")
    tol = cfg.alpha_solver_tolerance
    for _ in range(400):
        mid = math.sqrt(lo * hi)  # geometric midpoint: bounds span decades
        gm = g(mid)
        if abs(gm - rhs) < tol:
            return mid
        if gm > rhs:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            return mid
    return math.sqrt(lo * hi)


def _m_step_arrays(V, layout, post: PosteriorBatch, cfg: EMConfig,
                   expand: bool = False):
    """M-step on the stacked matrix ``V`` (observation column first).

    With ``expand`` the maximisation runs in a redundant parametrisation
    where Z has a free mean and b_0, c_0 are free, and the result is mapped
    back onto b_0 = c_0 = 1 and a zero-mean Z (parameter-expanded EM).  The
    observed-data model is unchanged by that map, so the likelihood still
    never decreases, but the location and scale ridges of the latent pair
    are crossed in one step instead of hundreds.
    """
    n = V.shape[0]
    counts = layout.counts
    src = layout.source_of_col
    lam_p, alp_p = post.lambda_prime, post.alpha_prime
    w = 1.0 / post.beta_prime
    m = post.m_prime
    xbar = (V @ layout.indicator) / counts

    G = np.sum(m * w)
    B = np.sum(w)
    H = np.sum(m * m * w)
    C = (m * w) @ xbar
    D = w @ xbar

    # b_e = (D_e/B - C_e/G) / (G/B - H/G - n lam'/(G alpha')), multiplied
    # through by G; the denominator is < 0 by Cauchy-Schwarz so G = 0 is fine
    denom = G * G / B - H - n * lam_p / alp_p
    b = (D * G / B - C) / denom
    if not expand:
        b[0] = 1.0
    a = (D - b * G) / B

    resid = V - a[src] - b[src] * m[:, None]
    ss = (alp_p * w) @ (resid ** 2) @ layout.indicator
    c2 = b ** 2 * lam_p + ss / (n * counts)

    if expand:
        mu = G / B
        lam = lam_p + alp_p * (H - G * G / B) / n
    else:
        lam = lam_p + alp_p * H / n
    coef = n / (alp_p * B)
    rhs = np.mean(np.log(post.beta_prime)) - float(digamma(alp_p))
    alpha = solve_alpha(coef, rhs, cfg)
    beta = coef * alpha
    if not np.all(c2 > 0) or not lam > 0:
        raise NumericalError("non-positive variance update")
    if expand:
        # Z* = b_0 (Z - mu) and omega* = c_0 omega restore the constraints
        a = a + b * mu
        lam *= b[0] ** 2 / c2[0]
        beta *= c2[0]
        b = b / b[0]
        c2 = c2 / c2[0]
    return GammaNormalParams(alpha, beta, lam, a, b[1:], np.sqrt(c2[1:]))


def m_step(data: Dataset, posteriors, params: GammaNormalParams,
           cfg: EMConfig = EMConfig()) -> GammaNormalParams:
    """Closed-form maximisation of the expected complete log-likelihood.

    ``posteriors`` is a :class:`PosteriorBatch` or a list of
    :class:`PosteriorNG` aligned with the cases of ``data``.  ``params`` is
    the parameter value the posteriors were computed at; the update itself
    only needs the posteriors.
    """
    data.require_observations()
    _check_layout(data.layout, params)
    if not isinstance(posteriors, PosteriorBatch):
        posteriors = PosteriorBatch.from_list(list(posteriors))
    if len(posteriors) != len(data) or len(data) < 1:
        raise ValidationError("posteriors must align one-to-one with cases")
    return _m_step_arrays(data.full_matrix(), data.layout, posteriors, cfg)


def expected_complete_loglik(data: Dataset, posteriors: PosteriorBatch,
                             params: GammaNormalParams) -> float:
    """Q(params | posteriors), up to a parameter-free constant.

    Equals minus one half of the expected complete deviance.
    """
    V = data.full_matrix()
    layout = data.layout
    src = layout.source_of_col
    a, b, c = params.a, params.b_full, params.c_full
    al, be, lam = params.alpha, params.beta, params.lam
    m, w = posteriors.m_prime, posteriors.E_prec
    elog = posteriors.E_log_prec
    z2 = posteriors.E_z2_prec
    n = V.shape[0]
    R = V - a[src]
    # E[(x - a - bZ)^2 w] = w (x-a)^2 - 2 b (x-a) E[Zw] + b^2 E[Z^2 w]
    quad = (w[:, None] * R ** 2 - 2 * b[src] * R * (m * w)[:, None]
            + (b[src] ** 2)[None, :] * z2[:, None])
    dev = np.sum(quad / c[src] ** 2) + n * np.sum(layout.counts * np.log(c ** 2))
    dev += np.sum(z2) / lam + n * math.log(lam)
    dev += np.sum(-2 * al * elog + 2 * be * w) - 2 * n * al * math.log(be) \
        + 2 * n * gammaln(al)
    return -0.5 * dev


def observed_loglik(data: Dataset, params: GammaNormalParams) -> float:
    """Marginal log-likelihood of members and observations, in closed form."""
    post = e_step_batch(data, params)
    return float(np.sum(_marginal_loglik(post, data.layout, params.c_full,
                                         params.alpha, params.beta, params.lam)))


def moment_init(data: Dataset) -> GammaNormalParams:
    """Method-of-moments starting point for EM and SEM.

    With m_e the ensemble mean of source e and s_e^2 its mean within-ensemble
    variance, the model gives ``cov(m_e, y) = b_e V`` (V = var(Z)) and
    ``var(m_e) = b_e^2 V + s_e^2 / K_e``.  The largest ensemble r yields
    ``b_r = (var(m_r) - s_r^2/K_r) / cov(m_r, y)`` and hence V; the other
    slopes follow from their covariance with y.  The observation noise is
    ``var(y) - V``.  Slopes and dispersion ratios are clipped to [0.1, 10].
    When no source has two members, V falls back to var(y) / 2.
    """
    data.require_observations()
    y = data.observations
    n = y.size
    if n < 2:
        raise InitializationError("need at least two cases")
    vy = np.var(y)
    if not vy > 0:
        raise InitializationError("observations have zero variance")
    E = data.n_sources
    K = data.layout.counts[1:]
    xbars = np.column_stack([data.source_members(e).mean(axis=1)
                             for e in range(1, E + 1)])
    within = np.array([np.mean(np.var(data.source_members(e), axis=1, ddof=1))
                       if K[e - 1] > 1 else np.nan for e in range(1, E + 1)])
    cov_y = np.array([np.mean((xbars[:, e] - xbars[:, e].mean()) * (y - y.mean()))
                      for e in range(E)])
    var_x = np.var(xbars, axis=0)

    r = int(np.argmax(K))
    v_z = np.nan
    if K[r] > 1 and cov_y[r] > 0:
        signal = var_x[r] - within[r] / K[r]
        if signal > 0:
            v_z = cov_y[r] ** 2 / signal
    if not (np.isfinite(v_z) and 0 < v_z < vy):
        v_z = 0.5 * vy
    v_eps = vy - v_z

    b = np.clip(cov_y / v_z, 0.1, 10.0)
    a = np.concatenate([[y.mean()], xbars.mean(axis=0)])
    noise = np.where(K > 1, within, var_x - b ** 2 * v_z)
    c = np.ones(E)
    ok = np.isfinite(noise) & (noise > 0)
    c[ok] = np.clip(np.sqrt(noise[ok] / v_eps), 0.1, 10.0)
    alpha = 3.0
    lam = float(np.clip(v_z / v_eps, 1e-3, 1e3))
    return GammaNormalParams(alpha, (alpha - 1) * v_eps, lam, a, b, c)


def _max_change(p: GammaNormalParams, q: GammaNormalParams) -> float:
    return float(np.max(np.abs(p.as_vector() - q.as_vector())))


def fit_em(data: Dataset, cfg: EMConfig = EMConfig(),
           init: Optional[GammaNormalParams] = None, expand: bool = True):
    """Run EM until the max-norm parameter change drops below ``cfg.epsilon``.

    Returns ``(params, trace)``.  When ``max_iterations`` is reached the last
    (highest likelihood) iterate is returned with termination ``"max_iter"``.
    """
    data.require_observations()
    if len(data) < 2:
        raise ValidationError("EM needs at least two cases")
    V = data.full_matrix()
    layout = data.layout
    theta = moment_init(data) if init is None else init
    _check_layout(layout, theta)
    trace = FitTrace(theta.names())
    for _ in range(cfg.max_iterations):
        post = posterior_full(V, layout, theta)
        ll = np.sum(_marginal_loglik(post, layout, theta.c_full, theta.alpha,
                                     theta.beta, theta.lam))
        trace.append(theta, ll)
        new = _m_step_arrays(V, layout, post, cfg, expand)
        change = _max_change(new, theta)
        theta = new
        if change < cfg.epsilon:
            trace.termination = "converged"
            break
    else:
        trace.termination = "max_iter"
    trace.append(theta, observed_loglik(data, theta))
    return theta, trace


def predict_student(params: GammaNormalParams, predictors: ForecastCase) -> StudentPredictive:
    """Predictive law of the observation given the members of one case."""
    layout, row = _case_layout(predictors)
    _check_layout(layout, params)
    loc, scale, dof = _student_arrays(params, row[None, :], layout)
    return StudentPredictive(float(loc[0]), float(scale[0]), float(dof))


def _student_arrays(params, X, layout):
    post = posterior_predictors(X, layout, params)
    loc = params.a[0] + post.m_prime
    scale = np.sqrt((post.lambda_prime + 1) * post.beta_prime / post.alpha_prime)
    return loc, scale, 2 * post.alpha_prime


def predict_student_batch(params: GammaNormalParams, data: Dataset):
    """Location, scale and degrees of freedom for every case of ``data``."""
    _check_layout(data.layout, params)
    return _student_arrays(params, data.members, data.layout)


def predictive_mean(params: GammaNormalParams, predictors: ForecastCase) -> float:
    """Linear form of the predictive mean in the ensemble means."""
    layout, row = _case_layout(predictors)
    K = layout.counts[1:]
    xbar = np.array([row[layout.columns(e).start - 1:layout.columns(e).stop - 1].mean()
                     for e in range(1, len(layout.schema))])
    w = params.b / params.c ** 2
    lam2 = 1.0 / (np.sum(K * params.b ** 2 / params.c ** 2) + 1 / params.lam)
    return float(params.a[0] + lam2 * np.sum(w * K * (xbar - params.a[1:])))


def contribution(params: GammaNormalParams, schema: Sequence[SourceSpec]) -> np.ndarray:
    """Per-member weight of each predictor source in the predictive mean.

    ``sum_e K_e * contrib_e == 1``.
    """
    layout = Layout(schema)
    _check_layout(layout, params)
    K = layout.counts[1:]
    ratio = params.b / params.c ** 2
    return ratio / np.sum(K * ratio)
