"""Sieve maximum (weighted) likelihood estimation.

The objective is maximised over ``(vartheta, psi)`` by BFGS with a
backtracking Armijo line search; the monotone sieve constraint is built into
the ``psi`` parameterisation, so the search is unconstrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bernstein import SieveConfig, cumhaz_eval, from_monotone, sieve_from_times, to_monotone
from .dataset import CohortDataset
from .likelihood import LikelihoodProblem, ModelSpec, build_problem, covariate_names

__all__ = [
    "FitConfig",
    "FitResult",
    "EstimationError",
    "IdentifiabilityError",
    "InitializationError",
    "fit",
    "fit_problem",
    "fit_main_ipw",
    "fit_working_ipw",
    "fit_working_full",
    "working_spec",
    "default_sieve",
    "initial_psi",
]


class EstimationError(RuntimeError):
    pass


class IdentifiabilityError(EstimationError):
    pass


class InitializationError(EstimationError):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-7
    relative_f_tolerance: float = 1e-10
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1 or self.restarts < 1:
            raise ValueError("max_iterations and restarts must be positive")
        if not (self.gradient_tolerance > 0 and self.relative_f_tolerance > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    """Output of one sieve fit.

    ``inv_hessian`` is the inverse of the negative Hessian of the objective at
    the solution (finite-difference of the analytic gradient), used to
    warm-start refits; it is ``None`` when not positive definite.
    """

    vartheta_hat: np.ndarray
    phi_hat: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    sieve: SieveConfig
    spec: ModelSpec = ModelSpec.MAIN
    names: tuple = ()
    reason: str = ""
    psi_hat: np.ndarray = field(default=None, repr=False)
    inv_hessian: np.ndarray | None = field(default=None, repr=False)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.vartheta_hat, self.psi_hat])

    def cumhaz(self, t):
        return cumhaz_eval(self.phi_hat, t, self.sieve)


def default_sieve(data: CohortDataset, degree: int = 3) -> SieveConfig:
    """Sieve spanning the smallest and largest finite positive endpoint of the cohort."""
    return sieve_from_times(data.finite_endpoints(), degree=degree)


def working_spec(data: CohortDataset, working: str = "aux") -> ModelSpec:
    """Working-model selector; falls back to ``z`` only when no auxiliary data exist."""
    if working == "aux" and data.has_xstar:
        return ModelSpec.WORKING_AUX
    if working in ("aux", "z"):
        return ModelSpec.WORKING_Z
    raise ValueError(f"unknown working model {working!r}")


def initial_psi(right, weights, config: SieveConfig) -> np.ndarray:
    """``psi`` whose ``phi`` rises linearly from ``0.1 L`` to ``L``.

    ``L = -log(fraction right-censored among positive-weight rows)``,
    floored at 0.1.
    """
    pos = np.asarray(weights) > 0
    frac = float(np.mean(~np.isfinite(np.asarray(right)[pos])))
    lam = -math.log(frac) if frac > 0 else math.inf
    lam = max(lam, 0.1) if math.isfinite(lam) else 10.0
    return from_monotone(np.linspace(0.1 * lam, lam, config.n_coef))


def _check_fittable(prob: LikelihoodProblem):
    if prob.n == 0:
        raise EstimationError("no subject has a positive weight")
    if prob.fin.all() or not prob.fin.any():
        raise EstimationError("need at least one positive-weight case and one non-case")
    if prob.d:
        aug = np.column_stack([np.ones(prob.n), prob.W])
        if np.linalg.matrix_rank(aug) < prob.d + 1:
            raise IdentifiabilityError(
                "covariates of positive-weight rows are collinear (or constant)"
            )


def _fd_inv_hessian(prob, x):
    """Inverse of the negative Hessian by central differences of the gradient.

    Eigenvalues are floored at ``1e-10`` of the largest so the result is
    always positive definite; ``None`` if a gradient is unavailable.
    """
    k = x.size
    hess = np.empty((k, k))
    for j in range(k):
        h = 1e-5 * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        _, gp = prob.value_and_grad(xp)
        _, gm = prob.value_and_grad(xm)
        if gp is None or gm is None:
            return None
        hess[:, j] = (gp - gm) / (2 * h)
    lam, vec = np.linalg.eigh(-0.5 * (hess + hess.T))
    top = float(lam.max())
    if not top > 0:
        return None
    lam = np.maximum(lam, 1e-10 * top)
    return (vec / lam) @ vec.T


def _bfgs(prob: LikelihoodProblem, x0, cfg: FitConfig, h0=None):
    """Maximise ``prob.value``; returns (x, value, grad, converged, iterations, reason)."""
    x = np.array(x0, dtype=float)
    f, g = prob.value_and_grad(x)
    if g is None:
        raise InitializationError("log-likelihood is not finite at the starting point")
    k = x.size
    if h0 is not None:
        H = np.array(h0, dtype=float)
    else:
        H = np.eye(k) / max(1.0, float(np.max(np.abs(g))))
    scaled = h0 is not None
    small_steps = 0
    it = 0
    while True:
        gnorm = float(np.max(np.abs(g))) if k else 0.0
        if gnorm <= cfg.gradient_tolerance:
            return x, f, g, True, it, "gradient"
        if it >= cfg.max_iterations:
            return x, f, g, False, it, "max_iterations"
        p = H @ g
        slope = float(g @ p)
        if not slope > 0:
            H = np.eye(k) / max(1.0, gnorm)
            p = H @ g
            slope = float(g @ p)
        step = 1.0
        accepted = False
        for _ in range(60):
            x_new = x + step * p
            f_new, g_new = prob.value_and_grad(x_new)
            if g_new is not None and f_new >= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        it += 1
        if not accepted:
            return x, f, g, False, it, "line_search"
        s = x_new - x
        y = g - g_new  # gradient of the negated objective changes by -y
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if not scaled:
                H = np.eye(k) * (sy / float(y @ y))
                scaled = True
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
        rel = abs(f_new - f) / max(abs(f), abs(f_new), 1.0)
        x, f, g = x_new, f_new, g_new
        small_steps = small_steps + 1 if rel <= cfg.relative_f_tolerance else 0
        if small_steps >= 2:
            return x, f, g, True, it, "f_tolerance"


def fit_problem(prob: LikelihoodProblem, cfg: FitConfig = FitConfig(), *, x0=None, h0=None,
                fixed_psi=None, hessian=True):
    """Fit a prepared problem; returns ``(x, loglik, grad, converged, iterations, reason, inv_hessian)``.

    ``fixed_psi`` holds the sieve coefficients fixed and optimises the
    regression coefficients only.
    """
    _check_fittable(prob)
    if fixed_psi is not None:
        fixed_psi = np.asarray(fixed_psi, dtype=float)
        sub = _FixedPsi(prob, fixed_psi)
        start = np.zeros(prob.d) if x0 is None else np.asarray(x0, dtype=float)[: prob.d]
        xs, f, g, conv, it, why = _bfgs(sub, start, cfg)
        return np.concatenate([xs, fixed_psi]), f, g, conv, it, why, None
    if x0 is None:
        x0 = np.concatenate([np.zeros(prob.d), initial_psi(prob.right, prob.w, prob.config)])
    best = None
    for attempt in range(cfg.restarts):
        start = np.array(x0, dtype=float)
        if attempt:
            rng = np.random.default_rng([cfg.seed, attempt])
            start[prob.d:] += rng.normal(0.0, 0.5, prob.n_coef)
        try:
            out = _bfgs(prob, start, cfg, h0=h0 if attempt == 0 else None)
            out = _polish(prob, out, cfg)
        except InitializationError:
            if attempt == 0 and cfg.restarts == 1:
                raise
            continue
        if best is None or out[1] > best[1]:
            best = out
    if best is None:
        raise InitializationError("no start produced a finite log-likelihood")
    x, f, g, conv, it, why = best
    inv_h = _fd_inv_hessian(prob, x) if hessian else None
    return x, f, g, conv, it, why, inv_h


def _polish(prob, out, cfg: FitConfig, rounds: int = 3):
    # An f-change stop can leave the gradient well above tolerance when the
    # sieve drifts toward phi_0 = 0; restart from a curvature estimate.
    for _ in range(rounds):
        x, f, g, conv, it, why = out
        if why != "f_tolerance" or float(np.max(np.abs(g))) <= cfg.gradient_tolerance:
            return out
        h0 = _fd_inv_hessian(prob, x)
        if h0 is None:
            return out
        more = _bfgs(prob, x, replace(cfg, max_iterations=max(1, cfg.max_iterations - it)), h0=h0)
        if not more[1] >= f:
            return out
        out = more[:4] + (it + more[4], more[5])
    return out


class _FixedPsi:
    def __init__(self, prob, psi):
        self.prob, self.psi = prob, psi

    def value_and_grad(self, theta):
        v, g = self.prob.value_and_grad(np.concatenate([theta, self.psi]))
        return v, (None if g is None else g[: self.prob.d])


def _result(prob, sieve, spec, names, out) -> FitResult:
    x, f, g, conv, it, why, inv_h = out
    d = prob.d
    return FitResult(
        vartheta_hat=x[:d].copy(),
        phi_hat=to_monotone(x[d:]),
        loglik=f,
        converged=conv,
        iterations=it,
        gradient_norm=float(np.max(np.abs(g))) if g.size else 0.0,
        sieve=sieve,
        spec=spec,
        names=tuple(names),
        reason=why,
        psi_hat=x[d:].copy(),
        inv_hessian=inv_h,
    )


def fit(data: CohortDataset, weights, spec: ModelSpec = ModelSpec.MAIN, sieve: SieveConfig | None = None,
        fitcfg: FitConfig = FitConfig(), *, init: FitResult | None = None, fixed_psi=None,
        hessian: bool = True) -> FitResult:
    """Maximise the weighted sieve log-likelihood.

    Parameters
    ----------
    data : CohortDataset
    weights : array-like of shape (n,)
        Non-negative subject weights; rows with weight 0 are ignored entirely.
    spec : ModelSpec
        Which covariates enter the linear predictor.
    sieve : SieveConfig, optional
        Defaults to degree 3 on the cohort's range of finite endpoints.
    fitcfg : FitConfig
    init : FitResult, optional
        Warm start; its inverse Hessian seeds the quasi-Newton matrix.
    fixed_psi : array-like, optional
        Hold the sieve coefficients fixed and fit the regression part only.

    Returns
    -------
    FitResult
    """
    sieve = sieve or default_sieve(data)
    prob = build_problem(data, weights, spec, sieve)
    x0 = h0 = None
    if init is not None:
        x0, h0 = init.x, init.inv_hessian
    out = fit_problem(prob, fitcfg, x0=x0, h0=h0, fixed_psi=fixed_psi, hessian=hessian)
    return _result(prob, sieve, spec, covariate_names(data, spec), out)


def fit_main_ipw(data: CohortDataset, sieve: SieveConfig | None = None, fitcfg: FitConfig = FitConfig(),
                 **kw) -> FitResult:
    """Inverse-probability-weighted fit of the full model on the case-cohort sample."""
    return fit(data, data.ipw_weights(), ModelSpec.MAIN, sieve, fitcfg, **kw)


def fit_working_ipw(data: CohortDataset, sieve: SieveConfig | None = None, fitcfg: FitConfig = FitConfig(),
                    working: str = "aux", **kw) -> FitResult:
    """Inverse-probability-weighted fit of the working model on the case-cohort sample."""
    return fit(data, data.ipw_weights(), working_spec(data, working), sieve, fitcfg, **kw)


def fit_working_full(data: CohortDataset, sieve: SieveConfig | None = None, fitcfg: FitConfig = FitConfig(),
                     working: str = "aux", **kw) -> FitResult:
    """Unweighted fit of the working model on the full cohort."""
    return fit(data, np.ones(data.n), working_spec(data, working), sieve, fitcfg, **kw)
