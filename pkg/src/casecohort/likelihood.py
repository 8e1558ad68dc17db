"""Weighted interval-censored Cox log-likelihood on the Bernstein sieve.

A subject with interval ``(L, R]`` and linear predictor ``eta`` contributes

    log[exp{-Lambda(L) e^eta} - exp{-Lambda(R) e^eta}]

with ``Lambda(0) = 0`` and a vanishing second term when ``R = inf``. The main
model and the working models differ only in which covariate blocks enter
``eta``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .bernstein import EXP_CAP, SieveConfig, tail_basis_matrix
from .dataset import CohortDataset, IntervalObservation

__all__ = [
    "ModelSpec",
    "CoxParams",
    "LikelihoodProblem",
    "DegenerateLikelihoodWarning",
    "GradientUnavailableError",
    "build_problem",
    "covariate_matrix",
    "covariate_names",
    "log_diff_exp",
    "log1mexp",
    "subject_loglik",
    "weighted_loglik",
    "weighted_loglik_gradient",
]

_LN2 = math.log(2.0)


class DegenerateLikelihoodWarning(RuntimeWarning):
    """Some evaluated subject has a zero-probability interval."""


class GradientUnavailableError(ArithmeticError):
    pass


class ModelSpec(enum.Enum):
    """Covariate blocks that feed the linear predictor."""

    MAIN = "main"  # (x, z)
    WORKING_AUX = "aux"  # (xstar, z)
    WORKING_Z = "z"  # (z)

    @property
    def blocks(self):
        return {"main": ("x", "z"), "aux": ("xstar", "z"), "z": ("z",)}[self.value]


def covariate_matrix(data: CohortDataset, spec: ModelSpec, rows=None) -> np.ndarray:
    """Design matrix of ``spec`` restricted to ``rows`` (boolean mask or indices)."""
    blocks = []
    for name in spec.blocks:
        arr = getattr(data, name)
        blocks.append(arr if rows is None else arr[rows])
    return np.hstack(blocks) if blocks else np.zeros((data.n, 0))


def covariate_names(data: CohortDataset, spec: ModelSpec) -> list:
    return [nm for b in spec.blocks for nm in getattr(data, f"{b}_names")]


@dataclass(frozen=True)
class CoxParams:
    """Regression coefficients and unconstrained sieve coefficients."""

    vartheta: np.ndarray
    psi: np.ndarray

    @classmethod
    def from_vector(cls, vec, d: int) -> "CoxParams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:d].copy(), vec[d:].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.atleast_1d(self.vartheta), np.atleast_1d(self.psi)]).astype(float)


def log1mexp(d):
    """``log(1 - exp(-d))`` for ``d >= 0``, accurate at both ends."""
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore"):
        small = d <= _LN2
        out = np.empty_like(d)
        out[small] = np.log(-np.expm1(-d[small]))
        out[~small] = np.log1p(-np.exp(-d[~small]))
    return out if out.ndim else float(out)


def log_diff_exp(a, b):
    """``log(exp(-a) - exp(-b))`` for ``0 <= a < b <= inf``."""
    a = float(a)
    b = float(b)
    if not (a >= 0 and b > a):
        raise ValueError(f"log_diff_exp needs 0 <= a < b, got a={a}, b={b}")
    if math.isinf(b):
        return -a
    return -a + log1mexp(b - a)


def _subject_eta(params: CoxParams, obs: IntervalObservation, spec: ModelSpec) -> float:
    parts = []
    for name in spec.blocks:
        v = getattr(obs, name)
        if v is None:
            if name == "xstar":
                continue
            raise ValueError(f"subject {obs.id}: covariate block {name!r} is not observed")
        parts.extend(v)
    w = np.asarray(parts, dtype=float)
    return float(np.dot(np.asarray(params.vartheta, dtype=float), w)) if w.size else 0.0


def subject_loglik(params: CoxParams, obs: IntervalObservation, spec: ModelSpec, config: SieveConfig) -> float:
    """Log-probability of one subject's interval. ``-inf`` marks a degenerate interval."""
    eta = _subject_eta(params, obs, spec)
    s = tail_basis_matrix(np.array([obs.left, obs.right if math.isfinite(obs.right) else 0.0]), config)
    e = _coef_exp(params.psi)
    scale = _bound_scale(e, config)
    lam_l = float(s[0] @ e) * scale
    r = math.exp(eta)
    if not math.isfinite(obs.right):
        return -lam_l * r
    gap = float((s[1] - s[0]) @ e) * scale * r
    if gap <= 0:
        return -math.inf
    return -lam_l * r + log1mexp(gap)


def _coef_exp(psi):
    return np.exp(np.minimum(np.asarray(psi, dtype=float), EXP_CAP))


def _bound_weights(m):
    # sum_j phi_j = sum_l (m + 1 - l) exp(psi_l)
    return np.arange(m + 1, 0, -1, dtype=float)


def _bound_scale(e, config: SieveConfig) -> float:
    if math.isinf(config.bound):
        return 1.0
    total = float(_bound_weights(config.degree) @ e)
    return min(1.0, config.bound / total)


class LikelihoodProblem:
    """Prepared arrays for fast repeated evaluation of one weighted objective.

    Only rows with positive weight are kept. Rows are put in a canonical
    order so that the result does not depend on how subjects were listed.

    Parameter vectors are laid out as ``(vartheta, psi)``.
    """

    def __init__(self, left, right, covariates, weights, config: SieveConfig):
        weights = np.asarray(weights, dtype=float)
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and non-negative")
        keep = weights > 0
        left = np.asarray(left, dtype=float)[keep]
        right = np.asarray(right, dtype=float)[keep]
        cov = np.asarray(covariates, dtype=float)[keep]
        w = weights[keep]
        self.rows = np.flatnonzero(keep)
        if cov.ndim == 1:
            cov = cov[:, None]
        if cov.size and not np.all(np.isfinite(cov)):
            raise ValueError("covariates of positive-weight rows must be finite")
        keys = [w, right, left] + [cov[:, j] for j in range(cov.shape[1] - 1, -1, -1)]
        order = np.lexsort(keys[::-1]) if keys else np.arange(w.size)
        self.rows = self.rows[order]
        self.left, self.right, self.W, self.w = left[order], right[order], cov[order], w[order]
        self.config = config
        self.d = self.W.shape[1]
        self.n_coef = config.n_coef
        self.fin = np.isfinite(self.right)
        self.SL = tail_basis_matrix(self.left, config)
        self.dS = tail_basis_matrix(self.right[self.fin], config) - self.SL[self.fin]
        self.w_fin = self.w[self.fin]
        self._bw = _bound_weights(config.degree)

    @property
    def n(self) -> int:
        return self.w.size

    @property
    def n_params(self) -> int:
        return self.d + self.n_coef

    def _pieces(self, x):
        x = np.asarray(x, dtype=float)
        theta, psi = x[: self.d], x[self.d:]
        e = _coef_exp(psi)
        scale = 1.0
        if not math.isinf(self.config.bound):
            total = float(self._bw @ e)
            if total > self.config.bound:
                scale = self.config.bound / total
        with np.errstate(over="ignore", invalid="ignore"):
            r = np.exp(self.W @ theta) if self.d else np.ones(self.n)
            hl = (self.SL @ e) * (scale * r)
            gap = (self.dS @ e) * (scale * r[self.fin])
        return theta, psi, e, scale, r, hl, gap

    def terms(self, x) -> np.ndarray:
        """Per-subject log-likelihood terms in canonical row order."""
        *_, hl, gap = self._pieces(x)
        with np.errstate(invalid="ignore"):
            ll = -hl
            ll[self.fin] += log1mexp(np.maximum(gap, 0.0))
        return ll

    def value(self, x) -> float:
        ll = self.terms(x)
        with np.errstate(invalid="ignore"):
            v = float(self.w @ ll)
        return v if not math.isnan(v) else -math.inf

    def value_and_grad(self, x):
        """Objective and its gradient; the gradient is ``None`` when the value is not finite."""
        theta, psi, e, scale, r, hl, gap = self._pieces(x)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            ll = -hl
            ll[self.fin] += log1mexp(np.maximum(gap, 0.0))
            v = float(self.w @ ll)
            if not math.isfinite(v):
                return -math.inf, None
            g_fin = 1.0 / np.expm1(gap)
            d_eta = -hl
            d_eta[self.fin] += g_fin * gap
            wd = self.w * d_eta
            grad_theta = self.W.T @ wd
            coef_l = -self.w * r
            coef_d = self.w_fin * r[self.fin] * g_fin
            v_e = scale * (self.SL.T @ coef_l + self.dS.T @ coef_d)
            if scale < 1.0:
                v_e -= float(wd.sum()) * self._bw / float(self._bw @ e)
            grad_psi = e * v_e * (psi < EXP_CAP)
        grad = np.concatenate([grad_theta, grad_psi])
        if not np.all(np.isfinite(grad)):
            return -math.inf, None
        return v, grad

    def gradient(self, x) -> np.ndarray:
        v, g = self.value_and_grad(x)
        if g is None:
            raise GradientUnavailableError("log-likelihood is not finite at this point")
        return g

    def degenerate_rows(self, x) -> np.ndarray:
        """Original row indices whose term is not finite."""
        return np.sort(self.rows[~np.isfinite(self.terms(x))])


def build_problem(data: CohortDataset, weights, spec: ModelSpec, config: SieveConfig):
    """Prepared problem for ``data``; only positive-weight rows are read."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (data.n,):
        raise ValueError(f"weights must have length {data.n}")
    keep = weights > 0
    full = np.zeros((data.n, len(covariate_names(data, spec))))
    full[keep] = covariate_matrix(data, spec, keep)
    return LikelihoodProblem(data.left, data.right, full, weights, config)


def weighted_loglik(params: CoxParams, data: CohortDataset, weights, spec: ModelSpec, config: SieveConfig) -> float:
    """Weighted sum of subject log-likelihoods over rows with positive weight.

    A degenerate row makes the total ``-inf``; the offending rows are named in
    a :class:`DegenerateLikelihoodWarning`.
    """
    prob = build_problem(data, weights, spec, config)
    x = params.to_vector()
    value = prob.value(x)
    if not math.isfinite(value):
        bad = prob.degenerate_rows(x)
        warnings.warn(
            f"degenerate likelihood at rows {[int(i) for i in bad[:20]]}",
            DegenerateLikelihoodWarning,
            stacklevel=2,
        )
    return value


def weighted_loglik_gradient(params: CoxParams, data: CohortDataset, weights, spec: ModelSpec, config: SieveConfig) -> np.ndarray:
    """Analytic gradient with respect to ``(vartheta, psi)``."""
    return build_problem(data, weights, spec, config).gradient(params.to_vector())
