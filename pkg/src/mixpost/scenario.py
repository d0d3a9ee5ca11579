"""Ensemble copula coupling on quantiles (ECC-Q).

Marginal forecasts post-processed independently per lead time lose their
joint structure.  ECC-Q restores it by handing the M predictive quantiles
of each lead time to the raw members in the order the raw members rank.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ValidationError


def mid_quantile_levels(M: int) -> np.ndarray:
    """Levels (i - 0.5) / M for i = 1..M."""
    if M < 1:
        raise ValidationError("M must be >= 1")
    return (np.arange(1, M + 1) - 0.5) / M


@dataclass(frozen=True)
class QuantileForecast:
    """Predictive quantiles, one sorted row of M values per lead time."""

    values: np.ndarray          # shape (H, M)
    lead_times: tuple = ()

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if np.any(np.diff(v, axis=1) < 0):
            raise ValidationError("quantiles must be sorted ascending per lead time")
        leads = tuple(self.lead_times) or tuple(range(v.shape[0]))
        if len(leads) != v.shape[0]:
            raise ValidationError(f"{len(leads)} lead times for {v.shape[0]} rows")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "lead_times", leads)

    @property
    def M(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_distributions(cls, dists, M: int, lead_times=()):
        """Quantiles of frozen scipy-like distributions at the mid levels."""
        q = mid_quantile_levels(M)
        return cls(np.array([d.ppf(q) for d in dists]), lead_times)

    @classmethod
    def from_samples(cls, samples, M: int, lead_times=()):
        """Empirical mid-level quantiles of Monte-Carlo samples, one row per lead.

        Samples should have at least 20 M draws per row.
        """
        S = np.atleast_2d(np.asarray(samples, dtype=float))
        q = mid_quantile_levels(M)
        return cls(np.quantile(S, q, axis=1).T, lead_times)


@dataclass(frozen=True)
class ScenarioSet:
    values: np.ndarray          # shape (M members, H lead times)
    lead_times: tuple

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["member", "lead_time", "value"])
            for m in range(self.values.shape[0]):
                for h, lead in enumerate(self.lead_times):
                    w.writerow([m + 1, lead, repr(float(self.values[m, h]))])


def ecc_q(quantiles: QuantileForecast, raw) -> ScenarioSet:
    """Reorder the quantiles of each lead time by the ranks of the raw members.

    ``raw`` is an (M, H) template: member m receives, at lead h, the
    quantile whose rank equals the rank of ``raw[m, h]`` in column h.  Ties
    in the template are broken by member index.
    """
    raw = np.asarray(raw, dtype=float)
    Q = quantiles.values
    if raw.ndim != 2 or raw.shape != (Q.shape[1], Q.shape[0]):
        raise ValidationError(f"raw template {raw.shape} does not match "
                              f"{Q.shape[1]} members x {Q.shape[0]} lead times")
    ranks = np.argsort(np.argsort(raw, axis=0, kind="stable"), axis=0, kind="stable")
    out = np.take_along_axis(Q.T, ranks, axis=0)
    return ScenarioSet(out, quantiles.lead_times)
