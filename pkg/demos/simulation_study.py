"""
Parameter recovery and calibration in a simulation study
========================================================

Each replication draws 200 censored days from known parameters, fits on
the first 100 and forecasts the last 100 twice: with the true parameters
("oracle") and with the estimates ("prediction").  Credible intervals for
the latent Z and omega^2 are scored against the simulated values, and
CRPS is compared with the raw ensembles.

``python demos/simulation_study.py`` runs 10 replications in about 15 s;
pass ``--full`` for the 100-replication study (a few minutes per core).
"""
import os
import sys

import numpy as np

from mixpost.simstudy import STUDY_PARAMS, StudyConfig, run_simulation_study

full = "--full" in sys.argv
cfg = StudyConfig(replications=100 if full else 10, seed=2024,
                  n_jobs=os.cpu_count() or 1)
report = run_simulation_study(cfg)
print(f"{report.n_ok}/{cfg.replications} replications succeeded\n")

est = report.estimate_table()
print("parameter   truth   median   interquartile range")
for name, truth in zip(STUDY_PARAMS.names(), STUDY_PARAMS.as_vector()):
    q1, med, q3 = np.percentile(est[name], [25, 50, 75])
    print(f"{name:>8} {truth:7.3f} {med:8.3f}   [{q1:.3f}, {q3:.3f}]")

print("\nmedian coverage of 88% intervals")
for method in ("oracle", "prediction"):
    print(f"  {method:>10}: Z {report.median_coverage(method, 'Z'):.3f}, "
          f"omega^2 {report.median_coverage(method, 'omega2'):.3f}")

print("\nmean CRPS over replications")
for method, v in report.crps_table().items():
    print(f"  {method:>10}: {v.mean():.4f}")

print("\nshare of rank-histogram p-values below 0.05")
for method, p in report.pvalue_table().items():
    print(f"  {method:>10}: {np.mean(p < 0.05):.2f}")
