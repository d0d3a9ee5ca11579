"""
Post-processing a temperature-like multi-source ensemble
========================================================

Three forecasting centres each run an ensemble: 10, 35 and 1 members.
Members of one centre are exchangeable, so the Gamma-Normal model ties
them to a shared latent signal Z_t with one (a_e, b_e, c_e) per centre.
This script simulates such data, fits the model by EM, and compares its
Student predictive with the raw ensembles and with Gaussian EMOS.

Run with ``python demos/gaussian_postprocessing.py``.
"""
import warnings

import numpy as np

from mixpost.emos import fit_emos, predict_emos_batch
from mixpost.gamma_normal import contribution, fit_em, predict_student_batch
from mixpost.simstudy import STUDY_K, STUDY_PARAMS, simulate_gamma_normal
from mixpost.verification import (RankHistogram, chi2_flatness, crps_gaussian,
                                  crps_sample_batch, crps_student,
                                  exchangeability_rank_test, observation_ranks)

rng = np.random.default_rng(1)

# 300 days: the first 200 train the models, the last 100 verify them
data = simulate_gamma_normal(STUDY_PARAMS, STUDY_K, 300, rng)
train, test = data.subset(slice(0, 200)), data.subset(slice(200, 300))
y = test.observations

# members of a centre should be exchangeable: every member takes every rank
# about equally often
for sid in (1, 2):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = exchangeability_rank_test(train, sid, rng)
    print(f"source {sid}: smallest rank-occupancy p-value {p.min():.3f}")

# EM from the moment initialisation
params, trace = fit_em(train)
print(f"\nEM: {trace.n_iterations} iterations, log-likelihood {trace.loglik[-1]:.2f}")
for name, est, truth in zip(params.names(), params.as_vector(), STUDY_PARAMS.as_vector()):
    print(f"  {name:>7} {est:8.3f}   (truth {truth:6.3f})")

# how much one member of each centre moves the predictive mean
w = contribution(params, train.schema[1:])
for spec, wi in zip(train.schema[1:], w):
    print(f"source {spec.source_id}: weight per member {wi:.4f}, "
          f"whole ensemble {wi * spec.member_count:.3f}")

# Student predictive for the verification days
loc, scale, dof = predict_student_batch(params, test)
crps_gn = crps_student(loc, scale, dof, y)

emos = fit_emos(train)
mu, sigma = predict_emos_batch(emos, test)
crps_em = crps_gaussian(mu, sigma, y)

print("\nmean CRPS on the verification days")
print(f"  gamma-normal {crps_gn.mean():.4f}")
print(f"  EMOS         {crps_em.mean():.4f}")
for e in range(1, test.n_sources + 1):
    raw = crps_sample_batch(test.source_members(e), y)
    print(f"  raw source {test.layout.source_ids[e]} {raw.mean():.4f}")

# rank histogram of 19 draws from each predictive
ens = loc[:, None] + scale[:, None] * rng.standard_t(dof, (len(y), 19))
hist = RankHistogram.from_ranks(observation_ranks(ens, y, rng), 19)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    stat, p = chi2_flatness(hist)
print(f"\nrank histogram {hist.bin_counts.tolist()}  chi-square p = {p:.3f}")
