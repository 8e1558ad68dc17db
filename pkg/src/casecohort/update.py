"""Full-cohort update of the IPW estimator with weighted-bootstrap covariance.

The working model is fitted twice, once with IPW weights on the case-cohort
sample and once on the full cohort. The difference of the two estimates has
mean zero asymptotically and is correlated with the IPW estimate of the main
model, so subtracting its best linear prediction

    vartheta_bar = vartheta_hat - S12 S22^+ (vartheta*_hat - vartheta*_bar)

lowers the variance from ``S11`` to ``S11 - S12 S22^+ S21``. The blocks
``S`` are the covariance of ``sqrt(n) (vartheta_hat, vartheta*_hat -
vartheta*_bar)`` estimated by refitting all three models with Exp(1)
multipliers on the subject weights. The same multipliers are shared by the
three refits of a replicate; that is what carries the cross-covariance.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bernstein import SieveConfig
from .dataset import CohortDataset
from .estimator import (
    FitConfig,
    FitResult,
    default_sieve,
    fit_main_ipw,
    fit_problem,
    fit_working_full,
    fit_working_ipw,
)
from .likelihood import LikelihoodProblem, build_problem

__all__ = [
    "BootstrapConfig",
    "BootstrapError",
    "ReplicateFailure",
    "CovarianceBlocks",
    "UpdateResult",
    "PointFits",
    "rng_stream",
    "draw_bootstrap_weights",
    "point_fits",
    "bootstrap_replicate",
    "run_bootstrap",
    "estimate_sigma",
    "update_estimate",
    "fit_update",
]

log = logging.getLogger(__name__)

# Relative eigenvalue cutoff for the pseudo-inverse of S22.
PINV_RTOL = 1e-10


class BootstrapError(RuntimeError):
    pass


class ReplicateFailure(RuntimeError):
    pass


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator determined only by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 500
    seed: int = 0
    weight_distribution: str = "exponential"

    def __post_init__(self):
        if self.B < 2:
            raise ValueError("the bootstrap needs B >= 2")
        if self.weight_distribution != "exponential":
            raise ValueError("only Exp(1) multipliers are supported")


def draw_bootstrap_weights(n: int, stream: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. Exp(1) multipliers (mean and variance one)."""
    if n < 1:
        raise ValueError("n must be positive")
    return stream.exponential(1.0, size=n)


@dataclass(frozen=True)
class CovarianceBlocks:
    sigma11: np.ndarray
    sigma12: np.ndarray
    sigma22: np.ndarray
    n_replicates_used: int
    n: int
    n_failed: int = 0

    @property
    def sigma21(self) -> np.ndarray:
        return self.sigma12.T

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.sigma11, self.sigma12], [self.sigma21, self.sigma22]])


@dataclass
class UpdateResult:
    vartheta_bar: np.ndarray
    psi_hat: np.ndarray
    se_original: np.ndarray
    se_updated: np.ndarray
    gain: np.ndarray
    vartheta_hat: np.ndarray
    fallback: bool
    sigma: CovarianceBlocks = field(repr=False)


@dataclass
class PointFits:
    """The three estimates the update needs."""

    main: FitResult
    working_ipw: FitResult
    working_full: FitResult

    @property
    def contrast(self) -> np.ndarray:
        return self.working_ipw.vartheta_hat - self.working_full.vartheta_hat

    @property
    def converged(self) -> bool:
        return self.main.converged and self.working_ipw.converged and self.working_full.converged


def point_fits(data: CohortDataset, sieve: SieveConfig | None = None, fitcfg: FitConfig = FitConfig(),
               working: str = "aux", working_sieve: SieveConfig | None = None) -> PointFits:
    sieve = sieve or default_sieve(data)
    wsieve = working_sieve or sieve
    return PointFits(
        main=fit_main_ipw(data, sieve, fitcfg),
        working_ipw=fit_working_ipw(data, wsieve, fitcfg, working=working),
        working_full=fit_working_full(data, wsieve, fitcfg, working=working),
    )


class _Problems:
    """Base objectives of the three fits; bootstrap refits only rescale weights."""

    def __init__(self, data: CohortDataset, fits: PointFits):
        ipw = data.ipw_weights()
        self.main = build_problem(data, ipw, fits.main.spec, fits.main.sieve)
        self.wipw = build_problem(data, ipw, fits.working_ipw.spec, fits.working_ipw.sieve)
        self.wfull = build_problem(data, np.ones(data.n), fits.working_full.spec, fits.working_full.sieve)


def _reweighted(prob: LikelihoodProblem, u) -> LikelihoodProblem:
    out = object.__new__(LikelihoodProblem)
    out.__dict__.update(prob.__dict__)
    out.w = prob.w * u[prob.rows]
    out.w_fin = out.w[prob.fin]
    return out


def _refit(prob, u, base: FitResult, fitcfg):
    p = _reweighted(prob, u)
    try:
        x, f, g, conv, it, why, _ = fit_problem(p, fitcfg, x0=base.x, h0=base.inv_hessian, hessian=False)
    except Exception as exc:  # any numerical breakdown counts as a failed replicate
        raise ReplicateFailure(str(exc)) from exc
    if not conv:
        raise ReplicateFailure(f"refit did not converge ({why})")
    return x[: prob.d]


def bootstrap_replicate(data: CohortDataset, u, fits: PointFits, fitcfg: FitConfig = FitConfig(),
                        problems: _Problems | None = None):
    """Refit the main, working-IPW and working-full models under multipliers ``u``.

    ``u`` is either one vector shared by all three refits (the estimator) or
    an array of shape ``(3, n)`` giving separate multipliers per refit.

    Returns
    -------
    (vartheta_b, working_ipw_b, working_full_b)

    Raises
    ------
    ReplicateFailure
        If any refit fails to converge.
    """
    u = np.asarray(u, dtype=float)
    us = (u, u, u) if u.ndim == 1 else tuple(u)
    if any(v.shape != (data.n,) for v in us) or any(np.any(v <= 0) for v in us):
        raise ValueError("multipliers must be positive with one per subject")
    probs = problems or _Problems(data, fits)
    return (
        _refit(probs.main, us[0], fits.main, fitcfg),
        _refit(probs.wipw, us[1], fits.working_ipw, fitcfg),
        _refit(probs.wfull, us[2], fits.working_full, fitcfg),
    )


def estimate_sigma(replicates, n: int) -> CovarianceBlocks:
    """Covariance blocks from bootstrap triples; ``None`` entries are failed replicates.

    The sample covariance (denominator ``B_used - 1``) of
    ``sqrt(n) * (vartheta_b, working_ipw_b - working_full_b)`` is centred at
    the replicate means.
    """
    good = [r for r in replicates if r is not None]
    failed = len(replicates) - len(good)
    if len(good) < 2:
        raise BootstrapError(f"only {len(good)} successful bootstrap replicates; need at least 2")
    d = np.atleast_1d(good[0][0]).size
    stacked = np.array(
        [np.concatenate([np.atleast_1d(v), np.atleast_1d(wi) - np.atleast_1d(wf)]) for v, wi, wf in good]
    ) * np.sqrt(n)
    cov = np.atleast_2d(np.cov(stacked, rowvar=False, ddof=1))
    s11 = 0.5 * (cov[:d, :d] + cov[:d, :d].T)
    s22 = 0.5 * (cov[d:, d:] + cov[d:, d:].T)
    return CovarianceBlocks(s11, cov[:d, d:].copy(), s22, len(good), int(n), failed)


def update_estimate(point, sigma: CovarianceBlocks) -> UpdateResult:
    """Update estimator and its covariance.

    Parameters
    ----------
    point : PointFits or tuple
        Either fitted models or ``(vartheta_hat, working_ipw_hat, working_full_hat)``.
    sigma : CovarianceBlocks

    Notes
    -----
    ``S22`` is inverted through its eigendecomposition, discarding
    eigenvalues below ``1e-10`` times the largest. If ``S22`` is numerically
    zero (e.g. everyone is sampled) the IPW estimate is returned unchanged and
    ``fallback`` is set.
    """
    if isinstance(point, PointFits):
        vhat, wi, wf = point.main.vartheta_hat, point.working_ipw.vartheta_hat, point.working_full.vartheta_hat
    else:
        vhat, wi, wf = point
    vhat = np.atleast_1d(np.asarray(vhat, dtype=float))
    contrast = np.atleast_1d(np.asarray(wi, dtype=float)) - np.atleast_1d(np.asarray(wf, dtype=float))
    s11, s12, s22 = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (sigma.sigma11, sigma.sigma12, sigma.sigma22))
    if s12.shape != (vhat.size, contrast.size) or s22.shape != (contrast.size,) * 2:
        raise ValueError("covariance blocks do not match the estimate dimensions")
    lam, vec = np.linalg.eigh(0.5 * (s22 + s22.T))
    top = float(lam.max()) if lam.size else 0.0
    zero_tol = 1e-14 * max(1.0, float(np.max(np.abs(np.diag(s11)))) if s11.size else 1.0)
    if top <= zero_tol:
        fallback = True
        vbar = vhat.copy()
        psi = s11.copy()
    else:
        fallback = False
        keep = lam > PINV_RTOL * top
        s22_pinv = (vec[:, keep] / lam[keep]) @ vec[:, keep].T
        k = s12 @ s22_pinv
        vbar = vhat - k @ contrast
        psi = s11 - k @ s12.T
        psi = 0.5 * (psi + psi.T)
    n = sigma.n
    var11 = np.diag(s11)
    varpsi = np.clip(np.diag(psi), 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(varpsi > 0, var11 / varpsi, np.where(var11 > 0, np.inf, 1.0))
    return UpdateResult(
        vartheta_bar=vbar,
        psi_hat=psi,
        se_original=np.sqrt(np.clip(var11, 0.0, None) / n),
        se_updated=np.sqrt(varpsi / n),
        gain=gain,
        vartheta_hat=vhat,
        fallback=fallback,
        sigma=sigma,
    )


_WORKER = {}


def _init_worker(payload):
    _WORKER.clear()
    _WORKER.update(payload)
    _WORKER["problems"] = _Problems(payload["data"], payload["fits"])


def _replicate_task(b):
    w = _WORKER
    u = draw_bootstrap_weights(w["data"].n, rng_stream(w["seed"], *w["key"], b))
    try:
        return bootstrap_replicate(w["data"], u, w["fits"], w["fitcfg"], w["problems"])
    except ReplicateFailure as exc:
        log.debug("bootstrap replicate %d failed: %s", b, exc)
        return None


def default_threads() -> int:
    """Worker count from ``CASECOHORT_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("CASECOHORT_THREADS", "1")))
    except ValueError:
        return 1


def run_bootstrap(data: CohortDataset, fits: PointFits, bootcfg: BootstrapConfig = BootstrapConfig(),
                  fitcfg: FitConfig = FitConfig(), threads: int | None = None, key=()) -> CovarianceBlocks:
    """Weighted bootstrap of the three fits; replicate ``b`` draws from stream ``(seed, *key, b)``.

    Results do not depend on ``threads``.
    """
    threads = default_threads() if threads is None else max(1, int(threads))
    payload = {"data": data, "fits": fits, "fitcfg": fitcfg, "seed": bootcfg.seed, "key": tuple(key)}
    if threads == 1:
        _init_worker(payload)
        reps = [_replicate_task(b) for b in range(bootcfg.B)]
    else:
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(payload,)) as pool:
            reps = list(pool.map(_replicate_task, range(bootcfg.B), chunksize=max(1, bootcfg.B // (4 * threads))))
    return estimate_sigma(reps, data.n)


def fit_update(data: CohortDataset, sieve: SieveConfig | None = None, bootcfg: BootstrapConfig = BootstrapConfig(),
               fitcfg: FitConfig = FitConfig(), working: str = "aux", threads: int | None = None):
    """Point fits, bootstrap and update in one call; returns ``(PointFits, UpdateResult)``."""
    fits = point_fits(data, sieve, fitcfg, working)
    sigma = run_bootstrap(data, fits, bootcfg, fitcfg, threads)
    return fits, update_estimate(fits, sigma)
