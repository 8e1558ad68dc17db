"""scikit-learn style front ends.

:class:`SieveCoxIC` fits the interval-censored Cox model to a plain
covariate matrix with ``y = [left, right]``. :class:`CaseCohortUpdateCox`
runs the whole case-cohort pipeline (IPW fit, working fits, bootstrap,
update) on a :class:`~casecohort.dataset.CohortDataset`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import _check_sample_weight, check_array, check_is_fitted

from .bernstein import cumhaz_eval, sieve_from_times
from .dataset import CohortDataset
from .estimator import EstimationError, FitConfig, _result, fit_problem
from .likelihood import LikelihoodProblem, ModelSpec, covariate_matrix
from .update import BootstrapConfig, fit_update

__all__ = ["SieveCoxIC", "CaseCohortUpdateCox"]


def _check_intervals(y, n):
    y = np.asarray(y, dtype=float)
    if y.shape != (n, 2):
        raise ValueError(f"y must have shape ({n}, 2) holding [left, right]")
    left, right = y[:, 0], y[:, 1]
    if not np.all(np.isfinite(left)) or np.any(left < 0):
        raise ValueError("left endpoints must be finite and non-negative")
    if np.any(np.isnan(right)) or np.any(right <= left):
        raise ValueError("each right endpoint must exceed its left endpoint")
    return left, right


class SieveCoxIC(BaseEstimator):
    """Cox model for interval-censored data with a Bernstein-polynomial baseline.

    Parameters
    ----------
    degree : int, default=3
        Bernstein degree of the cumulative baseline hazard.
    max_iter : int, default=500
    tol : float, default=1e-7
        Max-norm gradient tolerance.
    n_restarts : int, default=1
    random_state : int, default=0
        Seed for the restart jitter.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    phi_ : ndarray of shape (degree + 1,)
        Nondecreasing Bernstein coefficients of the cumulative hazard.
    sieve_ : SieveConfig
    loglik_ : float
    converged_ : bool
    n_iter_ : int
    n_features_in_ : int
    """

    def __init__(self, degree=3, max_iter=500, tol=1e-7, n_restarts=1, random_state=0):
        self.degree = degree
        self.max_iter = max_iter
        self.tol = tol
        self.n_restarts = n_restarts
        self.random_state = random_state

    def _fitcfg(self):
        return FitConfig(max_iterations=self.max_iter, gradient_tolerance=self.tol,
                         restarts=self.n_restarts, seed=int(self.random_state or 0))

    def fit(self, X, y, sample_weight=None):
        """Fit on covariates ``X`` and intervals ``y[:, 0] < T <= y[:, 1]`` (``inf`` = censored)."""
        X = check_array(X, dtype=float)
        left, right = _check_intervals(y, X.shape[0])
        w = _check_sample_weight(sample_weight, X, dtype=float)
        ends = np.concatenate([left[(left > 0) & (w > 0)], right[np.isfinite(right) & (w > 0)]])
        if ends.size < 2:
            raise EstimationError("too few finite positive interval endpoints")
        self.sieve_ = sieve_from_times(ends, degree=self.degree)
        prob = LikelihoodProblem(left, right, X, w, self.sieve_)
        names = tuple(f"x{j}" for j in range(X.shape[1]))
        self.result_ = _result(prob, self.sieve_, ModelSpec.MAIN, names, fit_problem(prob, self._fitcfg()))
        self.coef_ = self.result_.vartheta_hat
        self.phi_ = self.result_.phi_hat
        self.loglik_ = self.result_.loglik
        self.converged_ = self.result_.converged
        self.n_iter_ = self.result_.iterations
        self.n_features_in_ = X.shape[1]
        self._n_fit = float(w.sum())
        return self

    def _X(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        """Linear predictor ``X @ coef_`` (log relative hazard)."""
        return self._X(X) @ self.coef_

    def predict_cumulative_hazard(self, X, times):
        """Array of shape (n_samples, n_times); times must lie in the fitted support or be 0."""
        risk = np.exp(self.predict(X))
        base = np.atleast_1d(cumhaz_eval(self.phi_, np.asarray(times, dtype=float), self.sieve_))
        return np.outer(risk, base)

    def predict_survival(self, X, times):
        return np.exp(-self.predict_cumulative_hazard(X, times))

    def score(self, X, y, sample_weight=None):
        """Mean (weighted) log-likelihood per subject."""
        X = self._X(X)
        left, right = _check_intervals(y, X.shape[0])
        w = _check_sample_weight(sample_weight, X, dtype=float)
        prob = LikelihoodProblem(left, right, X, w, self.sieve_)
        return prob.value(self.result_.x) / float(w.sum())


class CaseCohortUpdateCox(BaseEstimator):
    """IPW sieve estimator for a case-cohort study, updated with full-cohort working-model fits.

    Parameters
    ----------
    degree : int, default=3
    n_bootstrap : int, default=500
        Weighted-bootstrap replicates for the covariance blocks.
    working : {"aux", "z"}, default="aux"
        Working-model covariates: auxiliary plus cheap covariates, or cheap only.
    random_state : int, default=0
    n_jobs : int, default=1
    max_iter : int, default=500

    Attributes
    ----------
    coef_ : ndarray
        Updated estimate.
    coef_ipw_ : ndarray
        Inverse-probability-weighted estimate.
    se_, se_ipw_ : ndarray
        Bootstrap standard errors of the two estimates.
    covariance_ : ndarray
        Estimated asymptotic covariance of the updated estimate (not divided by n).
    fallback_ : bool
        True when the working-model contrast had no variance and no update was made.
    feature_names_ : tuple of str
    """

    def __init__(self, degree=3, n_bootstrap=500, working="aux", random_state=0, n_jobs=1, max_iter=500):
        self.degree = degree
        self.n_bootstrap = n_bootstrap
        self.working = working
        self.random_state = random_state
        self.n_jobs = n_jobs
        self.max_iter = max_iter

    def fit(self, X: CohortDataset, y=None):
        if not isinstance(X, CohortDataset):
            raise TypeError("CaseCohortUpdateCox.fit expects a CohortDataset")
        sieve = sieve_from_times(X.finite_endpoints(), degree=self.degree)
        fits, upd = fit_update(
            X, sieve,
            BootstrapConfig(B=self.n_bootstrap, seed=int(self.random_state or 0)),
            FitConfig(max_iterations=self.max_iter),
            working=self.working,
            threads=self.n_jobs,
        )
        self.fits_ = fits
        self.update_ = upd
        self.coef_ = upd.vartheta_bar
        self.coef_ipw_ = upd.vartheta_hat
        self.se_ = upd.se_updated
        self.se_ipw_ = upd.se_original
        self.covariance_ = upd.psi_hat
        self.fallback_ = upd.fallback
        self.feature_names_ = fits.main.names
        return self

    def predict(self, X):
        """Linear predictor from the updated coefficients.

        ``X`` is a matrix or a dataset; for a dataset, subjects whose ``x``
        was not measured get ``nan``.
        """
        check_is_fitted(self, "coef_")
        if isinstance(X, CohortDataset):
            return covariate_matrix(X, ModelSpec.MAIN) @ self.coef_
        X = check_array(X, dtype=float)
        return X @ self.coef_
