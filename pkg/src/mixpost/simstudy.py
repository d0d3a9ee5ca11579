"""Synthetic data from both models and the simulation-study pipeline."""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (GAUSSIAN, PRECIPITATION, DataError, Dataset,
                   GammaNormalParams, NumericalError, SourceSpec, TobitParams,
                   ValidationError)
from .gamma_normal import (EMConfig, fit_em, posterior_predictors,
                           predict_student_batch)
from .tobit import SEMConfig, TransformFit, forecast_sample_batch, sem_fit
from .verification import (RankHistogram, chi2_flatness, coverage_rate,
                           crps_sample_batch, crps_student, observation_ranks)


@dataclass(frozen=True)
class Latents:
    z: np.ndarray
    omega2: np.ndarray
    gaussian: np.ndarray  # full matrix on the Gaussian scale, observation first


def _schema(K, n_sources):
    K = [int(k) for k in K]
    if len(K) == n_sources + 1:
        if K[0] != 1:
            raise ValidationError("K_0 (observations) must be 1")
        K = K[1:]
    if len(K) != n_sources:
        raise ValidationError(f"{len(K)} member counts for {n_sources} sources")
    return [SourceSpec(e, k) for e, k in enumerate(K, start=1)]


def _simulate_latent(params: GammaNormalParams, K, n, rng):
    schema = _schema(K, params.n_sources)
    probe = Dataset(schema, [], np.empty((0, sum(s.member_count for s in schema))),
                    [])
    layout = probe.layout
    src = layout.source_of_col
    prec = rng.gamma(params.alpha, 1.0 / params.beta, size=n)
    omega = 1.0 / np.sqrt(prec)
    z = rng.standard_normal(n) * np.sqrt(params.lam) * omega
    eps = rng.standard_normal((n, layout.n_cols)) * omega[:, None]
    V = params.a[src] + params.b_full[src] * z[:, None] + params.c_full[src] * eps
    return schema, V, Latents(z, omega ** 2, V)


def simulate_gamma_normal(params: GammaNormalParams, K, n: int, rng,
                          return_latents: bool = False, lead_time: int = 0):
    """Draw ``n`` cases (members and observation) from the Gaussian model.

    ``K`` lists member counts per source, optionally led by K_0 = 1.
    """
    schema, V, lat = _simulate_latent(params, K, n, rng)
    data = Dataset(schema, np.arange(n), V[:, 1:], V[:, 0], GAUSSIAN, lead_time)
    return (data, lat) if return_latents else data


def censor(V, gamma_power: float = 1.0, nu: float = 0.0):
    """Map Gaussian-scale values to precipitation: ``1{x > nu} x^(1/gamma)``."""
    V = np.asarray(V, dtype=float)
    out = np.zeros_like(V)
    pos = V > nu
    out[pos] = V[pos] ** (1.0 / gamma_power)
    return out


def simulate_tobit(params: TobitParams, K, n: int, rng,
                   return_latents: bool = False, lead_time: int = 0):
    """Draw ``n`` censored cases from the Tobit model."""
    schema, V, lat = _simulate_latent(params.base, K, n, rng)
    W = censor(V, params.gamma_power, params.nu)
    data = Dataset(schema, np.arange(n), W[:, 1:], W[:, 0], PRECIPITATION,
                   lead_time)
    return (data, lat) if return_latents else data


# configuration of the reference simulation study
STUDY_K = (1, 10, 35, 1)
STUDY_PARAMS = GammaNormalParams(
    alpha=2.5, beta=3.0, lam=0.5, a=[0.0, 1.0, 0.7, -0.1], b=[1.1, 1.0, 0.9],
    c=[0.8, 0.7, 1.1])


# ---------------------------------------------------------------------------
# simulation study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    """Settings of a parameter-recovery and forecast-verification study.

    A :class:`TobitParams` truth runs the censored pipeline (SEM fit, Gibbs
    forecasts); a :class:`GammaNormalParams` truth runs the Gaussian one
    (EM fit, Student forecasts).
    """

    true_params: object = TobitParams(STUDY_PARAMS)
    K: tuple = STUDY_K
    n_train: int = 100
    n_test: int = 100
    replications: int = 100
    seed: int = 0
    sem: SEMConfig = SEMConfig()
    em: EMConfig = EMConfig()
    forecast_draws: int = 1000
    rank_members: int = 19
    coverage_level: float = 0.88
    n_jobs: int = 1

    def __post_init__(self):
        if self.replications < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValidationError("replications, n_train and n_test must be >= 1")
        if not isinstance(self.true_params, (TobitParams, GammaNormalParams)):
            raise ValidationError("true_params must be TobitParams or GammaNormalParams")
        if not 0 < self.coverage_level < 1:
            raise ValidationError("coverage_level must lie in (0, 1)")
        if self.rank_members < 1 or self.forecast_draws < self.rank_members:
            raise ValidationError("need forecast_draws >= rank_members >= 1")

    @property
    def censored(self) -> bool:
        return isinstance(self.true_params, TobitParams)

    @property
    def base(self) -> GammaNormalParams:
        p = self.true_params
        return p.base if isinstance(p, TobitParams) else p

    def to_dict(self) -> dict:
        p = self.true_params
        return {
            "model": "tobit" if self.censored else "gamma_normal",
            "true_params": p.to_dict(), "K": [int(k) for k in self.K],
            "n_train": self.n_train, "n_test": self.n_test,
            "replications": self.replications, "seed": self.seed,
            "sem": asdict(self.sem), "em": asdict(self.em),
            "forecast_draws": self.forecast_draws,
            "rank_members": self.rank_members,
            "coverage_level": self.coverage_level,
        }


@dataclass
class StudyReport:
    config: StudyConfig
    estimates: list = field(default_factory=list)   # (rep, name, estimate, truth)
    pvalues: list = field(default_factory=list)     # (rep, method, p)
    crps: list = field(default_factory=list)        # (rep, method, mean crps)
    coverage: list = field(default_factory=list)    # (rep, method, variable, rate)
    failures: list = field(default_factory=list)    # (rep, message)

    @property
    def n_ok(self) -> int:
        return self.config.replications - len(self.failures)

    def estimate_table(self) -> dict:
        """Parameter name -> array of estimates over successful replications."""
        out = {}
        for _, name, est, _ in self.estimates:
            out.setdefault(name, []).append(est)
        return {k: np.array(v) for k, v in out.items()}

    def crps_table(self) -> dict:
        out = {}
        for _, method, v in self.crps:
            out.setdefault(method, []).append(v)
        return {k: np.array(v) for k, v in out.items()}

    def pvalue_table(self) -> dict:
        out = {}
        for _, method, v in self.pvalues:
            out.setdefault(method, []).append(v)
        return {k: np.array(v) for k, v in out.items()}

    def median_coverage(self, method: str, variable: str) -> float:
        vals = [v for _, m, var, v in self.coverage if m == method and var == variable]
        return float(np.median(vals)) if vals else float("nan")

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "estimates.csv", ["replication", "parameter", "estimate", "truth"],
                    self.estimates)
        _write_rows(out / "pvalues.csv", ["replication", "method", "p_value"], self.pvalues)
        _write_rows(out / "crps.csv", ["replication", "method", "mean_crps"], self.crps)
        _write_rows(out / "coverage.csv", ["replication", "method", "variable", "coverage"],
                    self.coverage)
        manifest = {"config": self.config.to_dict(),
                    "successful_replications": self.n_ok,
                    "failed_replications": [{"replication": r, "error": msg}
                                            for r, msg in self.failures]}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                           encoding="utf-8")


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _interval(draws, level):
    tail = 0.5 * (1 - level)
    return np.quantile(draws, [tail, 1 - tail], axis=1).T


def _ranks_pvalue(samples, y, rng):
    ranks = observation_ranks(samples, y, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return chi2_flatness(RankHistogram.from_ranks(ranks, samples.shape[1]))[1]


def _thin(samples, m):
    idx = np.round(np.linspace(0, samples.shape[1] - 1, m)).astype(int)
    return samples[:, idx]


def _forecast_censored(cfg, params, test, rng):
    draws, z, w = forecast_sample_batch(params, test, cfg.forecast_draws, cfg.sem,
                                        rng, return_latents=True)
    crps = crps_sample_batch(draws, test.observations)
    return crps, _thin(draws, cfg.rank_members), z, 1.0 / w


def _forecast_gaussian(cfg, params, test, rng):
    loc, scale, dof = predict_student_batch(params, test)
    crps = crps_student(loc, scale, dof, test.observations)
    ens = loc[:, None] + scale[:, None] * rng.standard_t(dof, (len(test), cfg.rank_members))
    # exact latent posterior given the predictors: Z Student, omega^2 inverse gamma
    post = posterior_predictors(test.members, test.layout, params)
    n = cfg.forecast_draws
    w = rng.gamma(post.alpha_prime, 1.0 / post.beta_prime[:, None], (len(test), n))
    z = post.m_prime[:, None] + np.sqrt(post.lambda_prime / w) * rng.standard_normal(w.shape)
    return crps, ens, z, 1.0 / w


def _replication(cfg: StudyConfig, r: int):
    rng = np.random.default_rng([cfg.seed, r])
    n = cfg.n_train + cfg.n_test
    truth = cfg.true_params
    if cfg.censored:
        data, lat = simulate_tobit(truth, cfg.K, n, rng, return_latents=True)
    else:
        data, lat = simulate_gamma_normal(truth, cfg.K, n, rng, return_latents=True)
    train = data.subset(slice(0, cfg.n_train))
    test = data.subset(slice(cfg.n_train, n))
    z_true = lat.z[cfg.n_train:]
    om_true = lat.omega2[cfg.n_train:]

    out = {"estimates": [], "pvalues": [], "crps": [], "coverage": []}
    if cfg.censored:
        transform = TransformFit(truth.gamma_power, truth.transform_mu,
                                 truth.transform_sigma, float("nan"))
        sem_cfg = replace(cfg.sem, seed=int(rng.integers(2 ** 63)))
        fitted, _ = sem_fit(train, sem_cfg, transform, em_cfg=cfg.em)
        est = fitted.base
        forecast = _forecast_censored
    else:
        est, _ = fit_em(train, cfg.em)
        fitted = est
        forecast = _forecast_gaussian
    for name, v, t in zip(est.names(), est.as_vector(), cfg.base.as_vector()):
        out["estimates"].append((r, name, float(v), float(t)))

    y = test.observations
    for method, params in (("oracle", truth), ("prediction", fitted)):
        crps, ens, z, om = forecast(cfg, params, test, rng)
        out["crps"].append((r, method, float(crps.mean())))
        out["pvalues"].append((r, method, float(_ranks_pvalue(ens, y, rng))))
        for var, draws, tv in (("Z", z, z_true), ("omega2", om, om_true)):
            rate = coverage_rate(_interval(draws, cfg.coverage_level), tv)
            out["coverage"].append((r, method, var, rate))
    for e in range(1, test.n_sources + 1):
        members = test.source_members(e)
        method = f"raw_{test.layout.source_ids[e]}"
        out["crps"].append((r, method, float(crps_sample_batch(members, y).mean())))
        if members.shape[1] > 1:
            out["pvalues"].append((r, method, float(_ranks_pvalue(members, y, rng))))
    return out


def _safe_replication(args):
    cfg, r = args
    try:
        return r, _replication(cfg, r), None
    except (NumericalError, DataError) as exc:
        return r, None, f"{type(exc).__name__}: {exc}"


def run_simulation_study(cfg: StudyConfig) -> StudyReport:
    """Simulate, fit on the first ``n_train`` cases and verify on the rest.

    Replication r draws from the substream ``default_rng([seed, r])``, so
    results do not depend on ``n_jobs``.  Replications whose fit fails are
    recorded in ``failures`` and left out of every table.
    """
    tasks = [(cfg, r) for r in range(cfg.replications)]
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(_safe_replication, tasks))
    else:
        results = [_safe_replication(t) for t in tasks]
    report = StudyReport(cfg)
    for r, out, err in sorted(results, key=lambda t: t[0]):
        if err is not None:
            report.failures.append((r, err))
            continue
        for key in ("estimates", "pvalues", "crps", "coverage"):
            getattr(report, key).extend(out[key])
    return report
