"""Scores and calibration diagnostics for probabilistic forecasts."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaincc, ndtr
from scipy import stats

from .core import Dataset, ValidationError

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


class NotApplicableError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# CRPS
# ---------------------------------------------------------------------------

def crps_sample_batch(samples, y) -> np.ndarray:
    """Energy-form CRPS of each row of ``samples`` against ``y``.

    ``mean|X - y| - mean|X - X'| / 2`` where the second mean runs over all
    M^2 ordered pairs; evaluated in O(M log M) from the sorted sample.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    M = X.shape[1]
    if M < 1:
        raise ValidationError("CRPS needs a non-empty sample")
    if y.size != X.shape[0]:
        raise ValidationError(f"{X.shape[0]} samples for {y.size} observations")
    mae = np.mean(np.abs(X - y[:, None]), axis=1)
    Xs = np.sort(X, axis=1)
    # sum_{i,j} |x_i - x_j| = 2 sum_i (2i - M - 1) x_(i)
    w = 2 * np.arange(1, M + 1) - M - 1
    spread = 2 * (Xs @ w) / (M * M)
    return np.maximum(mae - 0.5 * spread, 0.0)


def crps_sample(sample, y: float) -> float:
    sample = np.asarray(sample, dtype=float).reshape(-1)
    if sample.size == 0:
        raise ValidationError("CRPS needs a non-empty sample")
    return float(crps_sample_batch(sample[None, :], [y])[0])


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma^2); sigma = 0 gives |y - mu|."""
    mu, sigma, y = np.broadcast_arrays(*(np.asarray(v, dtype=float)
                                         for v in (mu, sigma, y)))
    if np.any(sigma < 0):
        raise ValidationError("sigma must be non-negative")
    shape = mu.shape
    mu, sigma, y = (np.atleast_1d(v) for v in (mu, sigma, y))
    out = np.abs(y - mu)
    pos = sigma > 0
    s = sigma[pos]
    z = (y[pos] - mu[pos]) / s
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    out[pos] = s * (z * (2 * ndtr(z) - 1) + 2 * pdf - _INV_SQRT_PI)
    return out.reshape(shape) if shape else float(out[0])


def crps_student(loc, scale, dof, y):
    """Closed-form CRPS of a location-scale Student t with dof > 1."""
    loc, scale, dof, y = np.broadcast_arrays(*(np.asarray(v, dtype=float)
                                               for v in (loc, scale, dof, y)))
    if np.any(dof <= 1) or np.any(scale <= 0):
        raise ValidationError("Student CRPS needs dof > 1 and scale > 0")
    z = (y - loc) / scale
    cdf = stats.t.cdf(z, dof)
    pdf = stats.t.pdf(z, dof)
    const = 2 * np.sqrt(dof) / (dof - 1) * np.exp(
        betaln(0.5, dof - 0.5) - 2 * betaln(0.5, 0.5 * dof))
    out = scale * (z * (2 * cdf - 1) + 2 * pdf * (dof + z * z) / (dof - 1) - const)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# ranks and histograms
# ---------------------------------------------------------------------------

def observation_ranks(samples, y, rng) -> np.ndarray:
    """Rank (1..K+1) of each ``y`` among its sample row, ties broken at random."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[1] < 1 or X.shape[0] != y.size:
        raise ValidationError("ranks need K >= 1 members per observation")
    below = np.sum(X < y[:, None], axis=1)
    ties = np.sum(X == y[:, None], axis=1)
    # uniform on {0, ..., ties}
    extra = np.floor(rng.random(y.size) * (ties + 1)).astype(int)
    return 1 + below + extra


def observation_rank(sample, y: float, rng) -> int:
    return int(observation_ranks(np.asarray(sample, float)[None, :], [y], rng)[0])


@dataclass(frozen=True)
class RankHistogram:
    bin_counts: np.ndarray
    total: int

    def __post_init__(self):
        counts = np.asarray(self.bin_counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 2 or np.any(counts < 0):
            raise ValidationError("rank histogram needs >= 2 non-negative bins")
        if int(counts.sum()) != int(self.total):
            raise ValidationError("bin counts must sum to total")
        object.__setattr__(self, "bin_counts", counts)
        object.__setattr__(self, "total", int(self.total))

    @property
    def n_members(self) -> int:
        return self.bin_counts.size - 1

    @classmethod
    def from_ranks(cls, ranks, n_members: int) -> "RankHistogram":
        ranks = np.asarray(ranks, dtype=int).reshape(-1)
        if ranks.size and (ranks.min() < 1 or ranks.max() > n_members + 1):
            raise ValidationError(f"ranks must lie in 1..{n_members + 1}")
        counts = np.bincount(ranks - 1, minlength=n_members + 1)
        return cls(counts, ranks.size)


def _chi2_uniform(counts):
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    expected = total / counts.size
    stat = float(np.sum((counts - expected) ** 2) / expected)
    p = float(gammaincc(0.5 * (counts.size - 1), 0.5 * stat))
    return stat, p


def chi2_flatness(hist: RankHistogram):
    """Pearson chi-square test of a rank histogram against the flat one.

    Returns ``(statistic, p_value)`` with K degrees of freedom (K + 1 bins).
    Warns when the expected count per bin is below 5.
    """
    if hist.total == 0:
        raise ValidationError("empty rank histogram")
    if hist.total < 5 * hist.bin_counts.size:
        warnings.warn(f"chi-square flatness test with only {hist.total} ranks "
                      f"for {hist.bin_counts.size} bins", RuntimeWarning,
                      stacklevel=2)
    return _chi2_uniform(hist.bin_counts)


def exchangeability_rank_test(data: Dataset, source_id: int, rng=None) -> np.ndarray:
    """Rank-occupancy test of member exchangeability within one source.

    At every time the members of the source are ranked (ties broken at
    random); for each member the counts of how often it takes each rank
    are compared with the uniform 1/K by a chi-square test.  Returns the
    K p-values, one per member.
    """
    if source_id not in data.layout.source_ids or source_id == 0:
        raise ValidationError(f"unknown source {source_id}")
    e = data.layout.source_ids.index(source_id)
    X = data.source_members(e)
    n, K = X.shape
    if K < 2:
        raise NotApplicableError(f"source {source_id} has a single member: "
                                 "exchangeability is not testable")
    if n < 5 * K:
        warnings.warn(f"{n} cases for {K} members: chi-square approximation "
                      "is rough", RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(0) if rng is None else rng
    # random jitter of the sort key breaks ties uniformly
    order = np.lexsort((rng.random(X.shape), X), axis=1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(K)[None, :].repeat(n, 0), axis=1)
    occupancy = np.zeros((K, K))
    for k in range(K):
        occupancy[k] = np.bincount(ranks[:, k], minlength=K)
    return np.array([_chi2_uniform(occupancy[k])[1] for k in range(K)])


# ---------------------------------------------------------------------------
# intervals
# ---------------------------------------------------------------------------

def coverage_rate(intervals, truths) -> float:
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    t = np.asarray(truths, dtype=float).reshape(-1)
    if iv.shape[0] != t.size:
        raise ValidationError(f"{iv.shape[0]} intervals for {t.size} truths")
    if t.size == 0:
        raise ValidationError("coverage of an empty set")
    return float(np.mean((iv[:, 0] <= t) & (t <= iv[:, 1])))


def bootstrap_ci(values, B: int = 1000, level: float = 0.90, rng=None):
    """Percentile interval of the mean under iid resampling."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size < 2 or B < 100 or not 0 < level < 1:
        raise ValidationError("bootstrap needs n >= 2, B >= 100, 0 < level < 1")
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, v.size, size=(B, v.size))
    means = v[idx].mean(axis=1)
    tail = 0.5 * (1 - level)
    lo, hi = np.quantile(means, [tail, 1 - tail])
    m = v.mean()
    # the percentile interval can miss the mean for very skewed samples
    return float(min(lo, m)), float(max(hi, m))


@dataclass(frozen=True)
class ScoreReport:
    mean_crps: float
    bootstrap_lo: float
    bootstrap_hi: float
    n: int
    per_case_scores: np.ndarray

    def __post_init__(self):
        if not self.bootstrap_lo <= self.mean_crps <= self.bootstrap_hi:
            raise ValidationError("bootstrap interval must contain the mean")


def score_report(per_case_scores, B: int = 1000, level: float = 0.90,
                 rng=None) -> ScoreReport:
    s = np.asarray(per_case_scores, dtype=float).reshape(-1)
    lo, hi = bootstrap_ci(s, B, level, rng)
    return ScoreReport(float(s.mean()), lo, hi, s.size, s)


def write_score_csv(path, rows):
    """``rows`` are (lead_time, method, ScoreReport) triples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lead_time", "method", "mean_crps", "ci_lo", "ci_hi"])
        for lead, method, rep in rows:
            w.writerow([lead, method, repr(rep.mean_crps), repr(rep.bootstrap_lo),
                        repr(rep.bootstrap_hi)])


def write_histogram_csv(path, hist: RankHistogram):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "count"])
        for i, c in enumerate(hist.bin_counts, start=1):
            w.writerow([i, int(c)])
