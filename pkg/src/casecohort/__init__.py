"""Sieve maximum likelihood for interval-censored case-cohort data, with a
full-cohort update of the IPW estimator."""

__version__ = "0.1.0"

from .bernstein import SieveConfig, cumhaz_eval, from_monotone, sieve_from_times, to_monotone
from .dataset import (
    CohortDataset,
    DataError,
    IntervalObservation,
    SamplingDesign,
    load_dataset,
    reduce_exam_history,
    sampling_weight,
    write_dataset,
)
from .estimator import FitConfig, FitResult, fit, fit_main_ipw, fit_working_full, fit_working_ipw
from .estimators import CaseCohortUpdateCox, SieveCoxIC
from .likelihood import CoxParams, ModelSpec, weighted_loglik, weighted_loglik_gradient
from .simulation import Scenario, calibrate_end_of_study, generate_cohort, run_study
from .update import BootstrapConfig, fit_update, run_bootstrap, update_estimate

__all__ = [
    "__version__",
    "SieveConfig",
    "cumhaz_eval",
    "from_monotone",
    "sieve_from_times",
    "to_monotone",
    "CohortDataset",
    "DataError",
    "IntervalObservation",
    "SamplingDesign",
    "load_dataset",
    "reduce_exam_history",
    "sampling_weight",
    "write_dataset",
    "FitConfig",
    "FitResult",
    "fit",
    "fit_main_ipw",
    "fit_working_full",
    "fit_working_ipw",
    "CaseCohortUpdateCox",
    "SieveCoxIC",
    "CoxParams",
    "ModelSpec",
    "weighted_loglik",
    "weighted_loglik_gradient",
    "Scenario",
    "calibrate_end_of_study",
    "generate_cohort",
    "run_study",
    "BootstrapConfig",
    "fit_update",
    "run_bootstrap",
    "update_estimate",
]
