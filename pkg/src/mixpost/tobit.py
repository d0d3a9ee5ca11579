"""Censored (Tobit) extension of the Gamma-Normal model for precipitation.

Observed values are ``X' = 1{X > nu} X^(1/gamma)`` where X follows the
Gamma-Normal model.  The power gamma is fit once on the observations by
censored maximum likelihood; the remaining parameters are estimated by
stochastic EM, whose S-step imputes the censored latent values with a short
Gibbs chain.  Forecasts are Monte-Carlo samples from a Gibbs chain that
conditions on the predictors only.

All chains are vectorised over cases and driven by one generator, so a run
is reproducible from its seed alone.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_ndtr, ndtr, ndtri

from .core import (GAUSSIAN, Dataset, DomainError, ForecastCase,
                   GammaNormalParams, NumericalError, TobitParams,
                   ValidationError)
from .gamma_normal import (EMConfig, FitTrace, _case_layout, _check_layout,
                           _m_step_arrays, _marginal_loglik, _posterior,
                           moment_init, posterior_full)

NU = 0.0
_TAIL = 5.0  # switch to exponential rejection beyond this many sd
_LOG_2PI = math.log(2 * math.pi)


class TransformFitError(NumericalError):
    """The transform optimiser did not converge; ``best`` holds its best point."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class TransformFit:
    gamma_power: float
    mu: float
    sigma: float
    final_loglik: float

    def __post_init__(self):
        if not (0 < self.gamma_power <= 1):
            raise ValidationError(f"gamma_power must lie in (0, 1], got {self.gamma_power}")
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")


IDENTITY = TransformFit(1.0, 0.0, 1.0, float("nan"))


@dataclass(frozen=True)
class SEMConfig:
    sem_iterations: int = 1000
    gibbs_inner_iterations: int = 4
    estimator_burn_in_fraction: float = 0.5
    seed: int = 0
    forecast_gibbs_iterations: int = 1100
    forecast_burn_in: int = 100

    def __post_init__(self):
        counts = (self.sem_iterations, self.gibbs_inner_iterations,
                  self.forecast_gibbs_iterations)
        if min(counts) < 1 or self.forecast_burn_in < 0:
            raise ValidationError(f"iteration counts must be >= 1: {self}")
        if not 0 <= self.estimator_burn_in_fraction < 1:
            raise ValidationError("estimator_burn_in_fraction must lie in [0, 1)")
        if self.forecast_burn_in >= self.forecast_gibbs_iterations:
            raise ValidationError("forecast_burn_in must be below forecast_gibbs_iterations")


# ---------------------------------------------------------------------------
# power transform
# ---------------------------------------------------------------------------

def transform_loglik(y, gamma_power, mu, sigma) -> float:
    """Censored-normal log-likelihood of ``y >= 0`` under ``y^gamma ~ N(mu, sigma^2)``.

    Zeros contribute ``log Phi((nu - mu) / sigma)``; positive values the
    density of ``y^gamma`` times the Jacobian ``gamma y^(gamma - 1)``.
    """
    y = np.asarray(y, dtype=float)
    pos = y[y > 0]
    n0 = y.size - pos.size
    logy = np.log(pos)
    u = (np.exp(gamma_power * logy) - mu) / sigma
    ll = np.sum(-0.5 * u * u - 0.5 * _LOG_2PI - math.log(sigma)
                + (gamma_power - 1) * logy + math.log(gamma_power))
    if n0:
        ll += n0 * float(log_ndtr((NU - mu) / sigma))
    return float(ll)


def _neg_loglik(theta, y):
    g, mu, log_s = theta
    return -transform_loglik(y, g, mu, math.exp(log_s))


_BOUNDS = [(0.05, 1.0), (-50.0, 50.0), (-10.0, 10.0)]
_NM_OPTIONS = {"xatol": 1e-10, "fatol": 1e-12, "maxiter": 40000, "maxfev": 80000}


def transform_gradient(y, fit: TransformFit) -> np.ndarray:
    """Central-difference gradient of the log-likelihood in (gamma, mu, log sigma)."""
    x0 = np.array([fit.gamma_power, fit.mu, math.log(fit.sigma)])
    grad = np.empty(3)
    for i in range(3):
        h = 1e-6 * max(1.0, abs(x0[i]))
        up, dn = x0.copy(), x0.copy()
        up[i] += h
        dn[i] -= h
        if i == 0 and up[0] > 1:  # one-sided at the gamma = 1 bound
            grad[i] = (_neg_loglik(dn, y) - _neg_loglik(x0, y)) / h
            continue
        grad[i] = (_neg_loglik(dn, y) - _neg_loglik(up, y)) / (2 * h)
    return grad


def fit_power_transform(observations) -> TransformFit:
    """Maximum-likelihood power transform for zero-inflated positive data.

    Nelder-Mead over (gamma, mu, log sigma) in a bounded box, from three
    starting powers; the best run is polished by restarting the simplex
    until the point stops moving.
    """
    y = np.asarray(observations, dtype=float).reshape(-1)
    if y.size == 0 or not np.all(np.isfinite(y)):
        raise DomainError("observations must be finite and non-empty")
    if np.any(y < 0):
        raise DomainError("precipitation observations must be >= 0")
    n_pos = int(np.sum(y > 0))
    if n_pos == 0:
        raise DomainError("all observations are zero: the transform is undefined")
    if n_pos < 10:
        raise DomainError(f"need at least 10 positive observations, got {n_pos}")

    best = None
    for g0 in (0.3, 0.6, 0.9):
        yg = y ** g0
        s0 = max(float(np.std(yg)), 1e-3)
        x0 = [g0, float(np.mean(yg)), math.log(s0)]
        res = minimize(_neg_loglik, x0, args=(y,), method="Nelder-Mead",
                       bounds=_BOUNDS, options=_NM_OPTIONS)
        if best is None or res.fun < best.fun:
            best = res
    for _ in range(5):
        res = minimize(_neg_loglik, best.x, args=(y,), method="Nelder-Mead",
                       bounds=_BOUNDS, options=_NM_OPTIONS)
        moved = np.max(np.abs(res.x - best.x))
        if res.fun <= best.fun:
            best = res
        if moved < 1e-8:
            break
    g, mu, log_s = best.x
    if not (np.isfinite(best.fun) and best.success):
        raise TransformFitError(f"transform fit did not converge: {best.message}",
                                best=best.x)
    return TransformFit(float(g), float(mu), float(math.exp(log_s)), float(-best.fun))


def apply_transform(x_prime, fit) -> np.ndarray:
    """Forward map ``x'^gamma``; zeros (censored) map to NaN."""
    g = fit.gamma_power if hasattr(fit, "gamma_power") else float(fit)
    x = np.asarray(x_prime, dtype=float)
    if np.any(x < 0):
        raise DomainError("transform input must be >= 0")
    with np.errstate(invalid="ignore"):
        return np.where(x > 0, x ** g, np.nan)


def inverse_transform(x, gamma_power: float, nu: float = NU) -> np.ndarray:
    """Back-transform ``1{x > nu} x^(1/gamma)``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > nu
    out[pos] = x[pos] ** (1.0 / gamma_power)
    return out


def _latent_matrix(W, gamma_power):
    if np.any(W < 0):
        raise DomainError("precipitation values must be >= 0")
    censored = ~(W > 0)
    return np.where(censored, NU, np.abs(W) ** gamma_power), censored


# ---------------------------------------------------------------------------
# truncated normal
# ---------------------------------------------------------------------------

def _tail_exceed(lo, rng):
    """Standard normal conditioned on T > lo (lo > 0) by exponential rejection."""
    lam = 0.5 * (lo + np.sqrt(lo * lo + 4.0))
    out = np.empty(lo.shape)
    pending = np.arange(lo.size)
    while pending.size:
        t = lo[pending] + rng.standard_exponential(pending.size) / lam[pending]
        ok = rng.random(pending.size) <= np.exp(-0.5 * (t - lam[pending]) ** 2)
        out[pending[ok]] = t[ok]
        pending = pending[~ok]
    return out


def sample_truncated_normal(mean, sd, upper, rng):
    """Draw from N(mean, sd^2) conditioned on the value being below ``upper``.

    Inverse CDF when the standardised bound is above -5, and Robert's
    exponential-proposal rejection sampler further out in the tail.
    Broadcasts over its array arguments.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(~(sd > 0)):
        raise ValidationError("sd must be positive")
    mean, sd, upper = np.broadcast_arrays(mean, sd, upper)
    b = (upper - mean) / sd
    u = 1.0 - rng.random(b.shape)  # in (0, 1]
    t = np.empty(b.shape)
    mid = b >= -_TAIL
    t[mid] = ndtri(u[mid] * ndtr(b[mid]))
    far = ~mid
    if np.any(far):
        t[far] = -_tail_exceed(-b[far], rng)
    x = mean + sd * t
    # u = 1 lands exactly on the bound; keep the support open
    x = np.minimum(x, np.nextafter(upper, -np.inf))
    return x if x.ndim else float(x)


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------

@dataclass
class _Block:
    """Layout and parameter vectors a chain conditions on."""

    layout: object
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    base: GammaNormalParams

    @classmethod
    def make(cls, layout, params: GammaNormalParams, with_observation: bool):
        if with_observation:
            return cls(layout, params.a, params.b_full, params.c_full, params)
        return cls(layout.predictor_layout(), params.a[1:], params.b, params.c,
                   params)

    def prior(self, n, rng):
        w = rng.gamma(self.base.alpha, 1.0 / self.base.beta, size=n)
        z = np.sqrt(self.base.lam / w) * rng.standard_normal(n)
        return z, w

    def impute(self, V, rows, cols, z, w, rng):
        s = self.layout.source_of_col[cols]
        V[rows, cols] = sample_truncated_normal(
            self.a[s] + self.b[s] * z[rows], self.c[s] / np.sqrt(w[rows]), NU, rng)

    def draw_latent(self, V, rng):
        p = self.base
        post = _posterior(V, self.layout, self.a, self.b, self.c, p.alpha,
                          p.beta, p.lam)
        w = rng.gamma(post.alpha_prime, 1.0 / post.beta_prime)
        z = post.m_prime + np.sqrt(post.lambda_prime / w) * rng.standard_normal(w.size)
        return z, w


def gibbs_sweep(case_prime: ForecastCase, current_X, z: float, omega_inv2: float,
                params: TobitParams, rng):
    """One sweep of the latent-variable Gibbs sampler for a single case.

    ``current_X`` is the latent case on the transformed scale, observation
    first when ``case_prime`` carries one.  Step 1 redraws every censored
    coordinate below nu given (z, omega^-2); step 2 draws (Z, omega^-2) from
    their normal-gamma posterior given the completed case.  When the case
    has no observation the chain conditions on the predictors only.
    """
    layout, row = _case_layout(case_prime)
    _check_layout(layout, params.base)
    with_obs = case_prime.observation is not None
    if with_obs:
        row = np.concatenate([[case_prime.observation], row])
    V0, censored = _latent_matrix(row[None, :], params.gamma_power)
    X = np.array(current_X, dtype=float).reshape(1, -1)
    if X.shape != V0.shape:
        raise ValidationError(f"current_X has {X.shape[1]} entries, case has {V0.shape[1]}")
    if not np.array_equal(X[~censored], V0[~censored]):
        raise ValidationError("uncensored entries of current_X must equal the transformed case")
    block = _Block.make(layout, params.base, with_obs)
    rows, cols = np.nonzero(censored)
    zz, ww = np.array([float(z)]), np.array([float(omega_inv2)])
    if rows.size:
        block.impute(X, rows, cols, zz, ww, rng)
    zz, ww = block.draw_latent(X, rng)
    return X[0], float(zz[0]), float(ww[0])


def _s_step(V0, rows, cols, block: _Block, n_iter, rng):
    """Gibbs chain restarted from the prior; returns the completed matrix."""
    V = V0.copy()
    if rows.size == 0:
        return V
    z, w = block.prior(V.shape[0], rng)
    for i in range(n_iter):
        block.impute(V, rows, cols, z, w, rng)
        if i + 1 < n_iter:
            z, w = block.draw_latent(V, rng)
    return V


# ---------------------------------------------------------------------------
# stochastic EM
# ---------------------------------------------------------------------------

def transformed_dataset(data_prime: Dataset, gamma_power: float) -> Dataset:
    """Dataset on the Gaussian scale with censored entries set to nu."""
    members, _ = _latent_matrix(data_prime.members, gamma_power)
    obs = data_prime.observations
    tobs = np.where(np.isnan(obs), np.nan,
                    np.where(obs > 0, np.abs(obs) ** gamma_power, NU))
    return data_prime.replace(members=members, observations=tobs,
                              variable_kind=GAUSSIAN)


def sem_fit(data_prime: Dataset, cfg: SEMConfig = SEMConfig(),
            transform: TransformFit = IDENTITY,
            init: Optional[GammaNormalParams] = None,
            em_cfg: EMConfig = EMConfig(), expand: bool = True):
    """Stochastic EM for the censored model.

    Each iteration imputes the censored values of every case with
    ``cfg.gibbs_inner_iterations`` Gibbs sweeps at the current parameters,
    then applies one E-step and M-step to the completed data.  The estimate
    is the coordinate-wise mean of the iterates over the final
    ``1 - estimator_burn_in_fraction`` share of the run.

    Returns ``(TobitParams, FitTrace)``; the trace holds every iterate and
    the log-likelihood of the completed data at that iterate.
    """
    data_prime.require_observations()
    if len(data_prime) < 2:
        raise ValidationError("SEM needs at least two cases")
    gamma = transform.gamma_power
    layout = data_prime.layout
    V0, censored = _latent_matrix(data_prime.full_matrix(), gamma)
    rows, cols = np.nonzero(censored)
    theta = init
    if theta is None:
        theta = moment_init(transformed_dataset(data_prime, gamma))
    _check_layout(layout, theta)

    rng = np.random.default_rng(cfg.seed)
    trace = FitTrace(theta.names())
    V = V0
    for _ in range(cfg.sem_iterations):
        block = _Block.make(layout, theta, True)
        V = _s_step(V0, rows, cols, block, cfg.gibbs_inner_iterations, rng)
        post = posterior_full(V, layout, theta)
        ll = np.sum(_marginal_loglik(post, layout, theta.c_full, theta.alpha,
                                     theta.beta, theta.lam))
        trace.append(theta, ll)
        theta = _m_step_arrays(V, layout, post, em_cfg, expand)
    post = posterior_full(V, layout, theta)
    trace.append(theta, np.sum(_marginal_loglik(post, layout, theta.c_full,
                                                theta.alpha, theta.beta, theta.lam)))
    trace.termination = "completed"

    H = cfg.sem_iterations
    keep = max(1, int(math.ceil(H * (1 - cfg.estimator_burn_in_fraction))))
    path = trace.theta_matrix()[H - keep + 1:H + 1]
    estimate = GammaNormalParams.from_vector(path.mean(axis=0), theta.n_sources)
    params = TobitParams(estimate, gamma, NU, transform.mu, transform.sigma)
    return params, trace


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------

def forecast_gibbs(params: TobitParams, data_prime: Dataset, n_keep: int,
                   cfg: SEMConfig, rng):
    """Draws of (Z, omega^-2) given the censored predictors of every case.

    Returns arrays ``z, w`` of shape (n_cases, n_keep).  The chain starts
    from the prior, discards ``cfg.forecast_burn_in`` sweeps, then records
    ``n_keep`` consecutive states.  Observations are ignored.
    """
    layout = data_prime.layout
    _check_layout(layout, params.base)
    X, censored = _latent_matrix(data_prime.members, params.gamma_power)
    rows, cols = np.nonzero(censored)
    block = _Block.make(layout, params.base, False)
    n = X.shape[0]
    zs = np.empty((n, n_keep))
    ws = np.empty((n, n_keep))
    z, w = block.prior(n, rng)
    for i in range(cfg.forecast_burn_in + n_keep):
        if rows.size:
            block.impute(X, rows, cols, z, w, rng)
        z, w = block.draw_latent(X, rng)
        j = i - cfg.forecast_burn_in
        if j >= 0:
            zs[:, j] = z
            ws[:, j] = w
    return zs, ws


def _thin_index(n_kept, M):
    if n_kept == M:
        return np.arange(M)
    return np.round(np.linspace(0, n_kept - 1, M)).astype(int)


def forecast_sample_batch(params: TobitParams, data_prime: Dataset, M: int,
                          cfg: SEMConfig, rng, return_latents: bool = False):
    """``M`` predictive draws of the observation for every case.

    The Gibbs chain keeps ``max(iterations - burn_in, M)`` states, thinned
    evenly to ``M``; each state (z, w) yields one draw
    ``Y = a_0 + z + N(0, 1/w)`` which is then censored and back-transformed.
    Returns an (n_cases, M) array, and the thinned (z, w) draws when
    ``return_latents`` is set.
    """
    if M < 1:
        raise ValidationError("sample size M must be >= 1")
    n_kept = max(cfg.forecast_gibbs_iterations - cfg.forecast_burn_in, M)
    zs, ws = forecast_gibbs(params, data_prime, n_kept, cfg, rng)
    idx = _thin_index(n_kept, M)
    zs, ws = zs[:, idx], ws[:, idx]
    y = params.base.a[0] + zs + rng.standard_normal(zs.shape) / np.sqrt(ws)
    out = inverse_transform(y, params.gamma_power)
    return (out, zs, ws) if return_latents else out


def forecast_sample(params: TobitParams, predictors_prime: ForecastCase, M: int,
                    cfg: SEMConfig, rng) -> np.ndarray:
    """``M`` draws from the predictive law of one censored observation."""
    layout, row = _case_layout(predictors_prime)
    _check_layout(layout, params.base)
    data = Dataset(layout.schema[1:], [predictors_prime.time_index], row[None, :],
                   [np.nan], "precipitation")
    return forecast_sample_batch(params, data, M, cfg, rng)[0]


def write_forecast_samples(path, times, samples):
    """CSV with columns ``time,draw_index,value``."""
    samples = np.atleast_2d(samples)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "draw_index", "value"])
        for t, row in zip(times, samples):
            for i, v in enumerate(row):
                w.writerow([int(t), i, repr(float(v))])
