"""Exchangeable Gamma-Normal post-processing of multi-source ensemble forecasts.

Modules
-------
core          datasets, parameter containers, CSV and JSON I/O
gamma_normal  EM inference and the Student predictive (temperature-like data)
tobit         power transform, SEM and Gibbs forecasting (precipitation)
emos          Gaussian EMOS baseline
verification  CRPS, rank histograms, chi-square tests, coverage, bootstrap
scenario      ECC-Q reordering
simstudy      synthetic data and the simulation study
cli           command-line front end
"""
from .core import (GAUSSIAN, PRECIPITATION, DataError, Dataset, DomainError,
                   ForecastCase, GammaNormalParams, NumericalError, ParseError,
                   SchemaError, SourceSpec, TobitParams, ValidationError,
                   load_dataset, load_params, save_dataset, save_params)
from .gamma_normal import (EMConfig, FitTrace, PosteriorNG, StudentPredictive,
                           contribution, e_step, fit_em, m_step, moment_init,
                           observed_loglik, predict_student)
from .tobit import (SEMConfig, TransformFit, apply_transform,
                    fit_power_transform, forecast_sample, gibbs_sweep,
                    inverse_transform, sample_truncated_normal, sem_fit)
from .emos import EmosParams, fit_emos, predict_emos
from .verification import (RankHistogram, ScoreReport, bootstrap_ci,
                           chi2_flatness, coverage_rate, crps_gaussian,
                           crps_sample, crps_student,
                           exchangeability_rank_test, observation_rank)
from .scenario import QuantileForecast, ScenarioSet, ecc_q, mid_quantile_levels
from .simstudy import (StudyConfig, StudyReport, run_simulation_study,
                       simulate_gamma_normal, simulate_tobit)

__version__ = "0.1.0"
