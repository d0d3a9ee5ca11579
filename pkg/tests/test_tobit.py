import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mixpost.core import (PRECIPITATION, DomainError, ForecastCase,
                          GammaNormalParams, TobitParams,
                          ValidationError)
from mixpost.gamma_normal import EMConfig, fit_em, predict_student
from mixpost.simstudy import STUDY_K, STUDY_PARAMS, simulate_tobit
from mixpost.tobit import (SEMConfig, TransformFit, apply_transform,
                           fit_power_transform, forecast_sample, gibbs_sweep,
                           inverse_transform, sample_truncated_normal, sem_fit,
                           transform_gradient, transform_loglik,
                           transformed_dataset, write_forecast_samples)

from oracles import censored_pair_cdfs


def truncnorm_cdf(x, mean, sd, upper):
    return stats.truncnorm.cdf(x, -np.inf, (upper - mean) / sd, loc=mean, scale=sd)


# ---------------------------------------------------------------------------
# truncated normal
# ---------------------------------------------------------------------------

def test_truncated_normal_mean():
    rng = np.random.default_rng(1)
    draws = sample_truncated_normal(np.zeros(10 ** 6), 1.0, 0.0, rng)
    assert np.all(draws < 0)
    assert abs(draws.mean() + math.sqrt(2 / math.pi)) < 0.003


@pytest.mark.parametrize("mean,sd,upper", [(0.0, 1.0, 0.0), (2.0, 0.5, 1.7),
                                           (3.0, 1.0, -4.0), (10.0, 2.0, -20.0)])
def test_truncated_normal_ks(mean, sd, upper):
    # the last two cases cut 7 and 15 sd below the mean (rejection branch)
    rng = np.random.default_rng(2)
    draws = sample_truncated_normal(np.full(10 ** 5, mean), sd, upper, rng)
    assert np.all(draws < upper)
    p = stats.kstest(draws, lambda v: truncnorm_cdf(v, mean, sd, upper)).pvalue
    assert p > 0.01


def test_truncated_normal_without_effective_truncation():
    rng = np.random.default_rng(3)
    draws = sample_truncated_normal(np.full(10 ** 5, 1.5), 2.0, 1.5 + 40 * 2.0, rng)
    se = 2.0 / math.sqrt(draws.size)
    assert abs(draws.mean() - 1.5) < 4 * se
    assert abs(draws.std() - 2.0) < 0.03


def test_truncated_normal_scalar_and_errors():
    rng = np.random.default_rng(4)
    v = sample_truncated_normal(0.0, 1.0, -1.0, rng)
    assert isinstance(v, float) and v < -1.0
    with pytest.raises(ValidationError):
        sample_truncated_normal(0.0, 0.0, 1.0, rng)


# ---------------------------------------------------------------------------
# power transform
# ---------------------------------------------------------------------------

def synthetic_precip(gamma0, n, rng, mu=0.5, sigma=1.0):
    latent = rng.normal(mu, sigma, n)
    return np.where(latent > 0, np.abs(latent) ** (1 / gamma0), 0.0)


def test_transform_recovers_power():
    y = synthetic_precip(0.5, 5000, np.random.default_rng(5))
    fit = fit_power_transform(y)
    assert abs(fit.gamma_power - 0.5) < 0.05
    assert fit.final_loglik == pytest.approx(
        transform_loglik(y, fit.gamma_power, fit.mu, fit.sigma))


def test_transform_is_a_local_optimum():
    y = synthetic_precip(0.8, 2000, np.random.default_rng(6))
    fit = fit_power_transform(y)
    grad = transform_gradient(y, fit)
    assert np.linalg.norm(grad) <= 1e-4 * max(1.0, abs(fit.final_loglik))
    best = transform_loglik(y, fit.gamma_power, fit.mu, fit.sigma)
    for dg in (-1, 0, 1):
        for dm in (-1, 0, 1):
            for ds in (-1, 0, 1):
                g = min(fit.gamma_power * (1 + 1e-3 * dg), 1.0)
                ll = transform_loglik(y, g, fit.mu * (1 + 1e-3 * dm),
                                      fit.sigma * (1 + 1e-3 * ds))
                assert ll <= best + 1e-9 * abs(best)


def test_transform_errors():
    with pytest.raises(DomainError, match="zero"):
        fit_power_transform(np.zeros(50))
    with pytest.raises(DomainError):
        fit_power_transform(np.r_[np.zeros(40), np.ones(5)])
    with pytest.raises(DomainError):
        fit_power_transform(np.r_[-1.0, np.ones(20)])
    with pytest.raises(ValidationError):
        TransformFit(1.2, 0.0, 1.0, 0.0)


def test_forward_inverse_examples():
    assert inverse_transform(apply_transform(2.5, 0.43), 0.43) == pytest.approx(2.5, rel=1e-14)
    assert inverse_transform(-1.3, 0.43) == 0.0
    assert np.isnan(apply_transform(0.0, 0.43))
    with pytest.raises(DomainError):
        apply_transform(-0.1, 0.5)


@settings(max_examples=50, deadline=None)
@given(g=st.floats(0.05, 1.0),
       xs=st.lists(st.floats(1e-6, 1e4), min_size=2, max_size=30))
def test_forward_inverse_monotone(g, xs):
    x = np.sort(np.asarray(xs))
    fx = apply_transform(x, g)
    assert np.all(np.diff(fx) >= 0)
    assert np.allclose(inverse_transform(fx, g), x, rtol=1e-9)
    grid = np.linspace(-5, 5, 101)
    assert np.all(np.diff(inverse_transform(grid, g)) >= 0)


# ---------------------------------------------------------------------------
# Gibbs sweep
# ---------------------------------------------------------------------------

PAIR = GammaNormalParams(2.5, 3.0, 0.5, [0.0, 1.0], [1.1], [0.8])


def test_sweep_without_censoring_keeps_data():
    tp = TobitParams(STUDY_PARAMS, gamma_power=0.5)
    rng = np.random.default_rng(7)
    members = {e: rng.uniform(0.5, 3.0, k) for e, k in zip((1, 2, 3), STUDY_K)}
    case = ForecastCase(0, members, 2.0)
    X0 = np.concatenate([[2.0], *members.values()]) ** 0.5
    X, z, w = gibbs_sweep(case, X0, 0.0, 1.0, tp, rng)
    assert np.array_equal(X, X0)
    assert w > 0 and np.isfinite(z)


def test_sweep_censored_draws_below_threshold():
    tp = TobitParams(STUDY_PARAMS, gamma_power=0.5)
    rng = np.random.default_rng(8)
    members = {e: np.where(rng.random(k) < 0.5, 0.0, rng.uniform(0.5, 3, k))
               for e, k in zip((1, 2, 3), STUDY_K)}
    case = ForecastCase(0, members, 0.0)
    row = np.concatenate([[0.0], *members.values()])
    cens = row == 0
    X = np.where(cens, -0.5, row ** 0.5)
    z, w = 0.0, 1.0
    for _ in range(50):
        X, z, w = gibbs_sweep(case, X, z, w, tp, rng)
        assert np.all(X[cens] < 0)
        assert np.array_equal(X[~cens], row[~cens] ** 0.5)
    with pytest.raises(ValidationError):
        gibbs_sweep(case, np.where(cens, -0.5, 1.0), z, w, tp, rng)


def test_sweep_stationary_law_matches_quadrature():
    tp = TobitParams(PAIR)
    y = 1.3
    case = ForecastCase(0, {1: np.array([0.0])}, y)
    rng = np.random.default_rng(9)
    X, z, w = np.array([y, -0.1]), 0.0, 1.0
    xs, zs = np.empty(10 ** 5), np.empty(10 ** 5)
    for i in range(10 ** 5):
        X, z, w = gibbs_sweep(case, X, z, w, tp, rng)
        xs[i], zs[i] = X[1], z
    # drop a warm-up and thin to weaken serial dependence before the KS test
    xs, zs = xs[1000::10], zs[1000::10]
    zg = np.linspace(zs.min() - 0.1, zs.max() + 0.1, 150)
    xg = np.linspace(xs.min() - 0.1, 0.0, 150)
    zc, xc = censored_pair_cdfs(y, PAIR, zg, xg)
    assert stats.kstest(zs, lambda v: np.interp(v, zg, zc)).pvalue > 0.01
    assert stats.kstest(xs, lambda v: np.interp(v, xg, xc)).pvalue > 0.01


# ---------------------------------------------------------------------------
# SEM
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def censored_data():
    tp = TobitParams(STUDY_PARAMS)
    return simulate_tobit(tp, STUDY_K, 60, np.random.default_rng(10))


def test_sem_is_deterministic(censored_data):
    cfg = SEMConfig(sem_iterations=30, seed=11)
    p1, t1 = sem_fit(censored_data, cfg)
    p2, t2 = sem_fit(censored_data, cfg)
    assert p1 == p2
    assert np.array_equal(t1.theta_matrix(), t2.theta_matrix())
    p3, _ = sem_fit(censored_data, SEMConfig(sem_iterations=30, seed=12))
    assert p3 != p1


def test_sem_estimate_is_tail_average(censored_data):
    cfg = SEMConfig(sem_iterations=40, seed=13)
    params, trace = sem_fit(censored_data, cfg)
    assert trace.n_iterations == 40
    path = trace.theta_matrix()
    assert np.allclose(params.base.as_vector(), path[21:41].mean(axis=0), rtol=1e-12)


def test_sem_without_censoring_matches_em():
    rng = np.random.default_rng(14)
    data = simulate_tobit(TobitParams(STUDY_PARAMS), STUDY_K, 80, rng)
    # lift everything above zero so nothing is censored
    shift = 0.5
    data = data.replace(members=data.members + shift,
                        observations=data.observations + shift)
    em_cfg = EMConfig(epsilon=1e-12, max_iterations=5000)
    em, _ = fit_em(transformed_dataset(data, 1.0), em_cfg)
    sem, _ = sem_fit(data, SEMConfig(sem_iterations=600, seed=15), em_cfg=em_cfg)
    assert np.allclose(sem.base.as_vector(), em.as_vector(), rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------

def test_forecast_contract():
    tp = TobitParams(STUDY_PARAMS, gamma_power=0.5)
    rng = np.random.default_rng(16)
    members = {e: np.where(rng.random(k) < 0.3, 0.0, rng.uniform(0, 2, k))
               for e, k in zip((1, 2, 3), STUDY_K)}
    out = forecast_sample(tp, ForecastCase(0, members), 300, SEMConfig(), rng)
    assert out.shape == (300,) and np.all(out >= 0)


def test_forecast_zero_mass_matches_latent_student():
    base = GammaNormalParams(2.5, 3.0, 0.5, [-1.0, 1.0, 0.7, -0.1],
                             [1.1, 1.0, 0.9], [0.8, 0.7, 1.1])
    tp = TobitParams(base)
    rng = np.random.default_rng(17)
    members = {e: rng.uniform(0.5, 1.5, k) for e, k in zip((1, 2, 3), STUDY_K)}
    M = 20000
    cfg = SEMConfig(forecast_gibbs_iterations=M + 100, forecast_burn_in=100)
    draws = forecast_sample(tp, ForecastCase(0, members), M, cfg, rng)
    p_hat = np.mean(draws == 0)
    pred = predict_student(base, ForecastCase(0, members))
    p = stats.t.cdf(0.0, pred.dof, loc=pred.location, scale=pred.scale)
    assert 0.05 < p < 0.95
    assert abs(p_hat - p) < 2 * math.sqrt(p * (1 - p) / M)


def test_forecast_all_censored_is_mostly_dry():
    tp = TobitParams(STUDY_PARAMS)
    members = {e: np.zeros(k) for e, k in zip((1, 2, 3), STUDY_K)}
    draws = forecast_sample(tp, ForecastCase(0, members), 4000, SEMConfig(),
                            np.random.default_rng(18))
    assert np.mean(draws == 0) > 0.5


def test_write_forecast_samples(tmp_path):
    path = tmp_path / "s.csv"
    write_forecast_samples(path, [3, 4], np.array([[0.0, 1.5], [2.0, 0.25]]))
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["time", "draw_index", "value"]
    assert rows[1:] == [["3", "0", "0.0"], ["3", "1", "1.5"],
                        ["4", "0", "2.0"], ["4", "1", "0.25"]]


def test_simulated_tobit_data_is_precipitation():
    data = simulate_tobit(TobitParams(STUDY_PARAMS, gamma_power=0.5), STUDY_K, 30,
                          np.random.default_rng(19))
    assert data.variable_kind == PRECIPITATION
    assert np.all(data.members >= 0) and np.any(data.members == 0)
