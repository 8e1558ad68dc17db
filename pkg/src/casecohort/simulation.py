"""Monte Carlo studies of the IPW and update estimators.

Failure times follow a Cox model with baseline ``Lambda(t) = 0.2 t^2``.
Each subject is examined at jittered versions of ``n_t`` equally spaced
visits, attending each with probability ``attendance``; the end-of-study time
``u`` is calibrated to hit a target case rate.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm

from .dataset import CohortDataset, SamplingDesign
from .estimator import FitConfig, FitResult, default_sieve
from .update import BootstrapConfig, BootstrapError, point_fits, rng_stream, run_bootstrap, update_estimate

__all__ = [
    "Scenario",
    "ReplicationReport",
    "CalibrationError",
    "ScenarioError",
    "BASELINE_RATE",
    "baseline_cumhaz",
    "failure_time_from_uniform",
    "generate_failure_time",
    "generate_exam_schedule",
    "generate_cohort",
    "case_rate",
    "calibrate_end_of_study",
    "run_study",
    "cumhaz_l2_distance",
    "load_scenarios",
    "REPORT_COLUMNS",
]

BASELINE_RATE = 0.2
# Noise SDs for the nominal X/X* correlations used in the published design.
RHO_TO_SIGMA = {0.95: 0.30, 0.75: 0.86, 0.50: 1.70}
CALIBRATION_KEY = 0xCA11B
REPORT_COLUMNS = (
    "scenario", "parameter", "p_c", "q_c", "method", "rho",
    "bias", "ssd", "ese", "cp", "re", "replicates", "failed",
)


class CalibrationError(RuntimeError):
    pass


class ScenarioError(ValueError):
    pass


def baseline_cumhaz(t):
    return BASELINE_RATE * np.asarray(t, dtype=float) ** 2


@dataclass(frozen=True)
class Scenario:
    """One simulation setting; ``u=None`` means "calibrate to ``p_c``"."""

    n: int = 1000
    covariate_setup: str = "x_only"
    beta: float = 0.3
    gamma: float = 0.5
    sigma_e: float = 0.30
    p_c: float = 0.2
    q_s: float = 0.2
    q_c: float = 1.0
    n_t: int = 12
    attendance: float = 0.8
    u: float | None = None
    degree: int = 3
    working: str = "aux"
    rho_label: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.covariate_setup not in ("x_only", "x_and_z"):
            raise ScenarioError(f"covariate_setup must be x_only or x_and_z, got {self.covariate_setup!r}")
        for nm in ("q_s", "q_c", "attendance"):
            v = getattr(self, nm)
            if not (0 < v <= 1):
                raise ScenarioError(f"{nm} must lie in (0, 1]")
        if not (0 < self.p_c < 1):
            raise ScenarioError("p_c must lie in (0, 1)")
        if self.n < 2 or self.n_t < 1 or self.degree < 1:
            raise ScenarioError("n, n_t and degree must be positive")
        if self.sigma_e < 0:
            raise ScenarioError("sigma_e must be non-negative")
        if self.u is not None and not self.u > 0:
            raise ScenarioError("u must be positive")
        if self.working not in ("aux", "z"):
            raise ScenarioError("working must be aux or z")

    @property
    def rho(self) -> float:
        """Correlation between X and X*."""
        return self.rho_label if self.rho_label is not None else 1.0 / math.sqrt(1.0 + self.sigma_e**2)

    @property
    def truth(self) -> np.ndarray:
        return np.array([self.beta, self.gamma] if self.covariate_setup == "x_and_z" else [self.beta])

    @property
    def parameter_names(self) -> tuple:
        return ("beta", "gamma") if self.covariate_setup == "x_and_z" else ("beta",)

    @property
    def design(self) -> SamplingDesign:
        return SamplingDesign(self.q_s, self.q_c)


def failure_time_from_uniform(uniform, eta):
    """Invert ``S(t) = exp(-0.2 t^2 e^eta)`` at ``uniform``."""
    return np.sqrt(-np.log(uniform) / (BASELINE_RATE * np.exp(eta)))


def generate_failure_time(eta, stream: np.random.Generator):
    eta = np.asarray(eta, dtype=float)
    return failure_time_from_uniform(1.0 - stream.random(eta.shape), eta)


def _visit_fractions(n, scenario: Scenario, stream, jitter=True, attendance=None):
    """Visit times divided by ``u`` and attendance mask, shape ``(n, n_t)``.

    Rows with no attended visit are redrawn.
    """
    p_attend = scenario.attendance if attendance is None else attendance
    nt = scenario.n_t
    j = np.arange(1, nt + 1)
    frac = np.empty((n, nt))
    mask = np.empty((n, nt), dtype=bool)
    todo = np.arange(n)
    while todo.size:
        k = todo.size
        eps = stream.uniform(-1.0 / 3.0, 1.0 / 3.0, (k, nt)) if jitter else np.zeros((k, nt))
        frac[todo] = (j + eps) / (nt + 1)
        mask[todo] = stream.random((k, nt)) < p_attend
        todo = todo[~mask[todo].any(axis=1)]
    return frac, mask


def generate_exam_schedule(scenario: Scenario, stream: np.random.Generator, *, jitter=True, attendance=None):
    """Attended examination times of one subject (strictly increasing)."""
    if scenario.u is None:
        raise ScenarioError("scenario has no end-of-study time; calibrate it first")
    frac, mask = _visit_fractions(1, scenario, stream, jitter, attendance)
    return scenario.u * frac[0][mask[0]]


def _covariates(n, scenario: Scenario, stream):
    if scenario.covariate_setup == "x_only":
        x = stream.standard_normal((n, 1))
        z = np.zeros((n, 0))
    else:
        xz = stream.multivariate_normal([0.0, 0.0], [[1.0, 0.2], [0.2, 1.0]], size=n, method="cholesky")
        x, z = xz[:, :1], xz[:, 1:]
    eta = scenario.beta * x[:, 0]
    if z.shape[1]:
        eta = eta + scenario.gamma * z[:, 0]
    return x, z, eta


def _brackets(t, times, mask):
    below = np.where(mask & (times < t[:, None]), times, 0.0)
    above = np.where(mask & (times >= t[:, None]), times, np.inf)
    return below.max(axis=1), above.min(axis=1)


def generate_cohort(scenario: Scenario, stream: np.random.Generator) -> CohortDataset:
    """Simulate a full cohort with phase-two sampling applied."""
    if scenario.u is None:
        raise ScenarioError("scenario has no end-of-study time; calibrate it first")
    n = scenario.n
    x, z, eta = _covariates(n, scenario, stream)
    xstar = x + scenario.sigma_e * stream.standard_normal((n, 1))
    t = generate_failure_time(eta, stream)
    frac, mask = _visit_fractions(n, scenario, stream)
    left, right = _brackets(t, scenario.u * frac, mask)
    delta = np.isfinite(right)
    sub = stream.random(n) < scenario.q_s
    pick = stream.random(n) < scenario.q_c
    zeta = ~sub & delta & pick
    return CohortDataset.from_arrays(
        left, right, scenario.design,
        x=x, z=z, xstar=xstar,
        eta=sub.astype(np.int8), zeta=zeta.astype(np.int8),
        x_names=("X",), z_names=("Z",)[: z.shape[1]], xstar_names=("Xstar",),
    )


class _RateCurve:
    """Case rate as a function of ``u`` under common random numbers."""

    def __init__(self, scenario: Scenario, n: int, stream):
        _, _, eta = _covariates(n, scenario, stream)
        self.t = generate_failure_time(eta, stream)
        frac, mask = _visit_fractions(n, scenario, stream)
        self.last = np.where(mask, frac, 0.0).max(axis=1)

    def __call__(self, u: float) -> float:
        return float(np.mean(self.t <= u * self.last))


def case_rate(scenario: Scenario, u: float, n: int, stream) -> float:
    """Monte Carlo case rate at end-of-study time ``u``."""
    return _RateCurve(scenario, n, stream)(u)


def calibrate_end_of_study(scenario: Scenario, target: float, stream, *, n: int = 50_000,
                           bracket=(0.1, 50.0), tol: float = 0.005) -> float:
    """End-of-study time giving case rate ``target``, by bisection on common random numbers."""
    if not 0 < target < 1:
        raise CalibrationError("target case rate must lie in (0, 1)")
    curve = _RateCurve(scenario, n, stream)
    lo, hi = map(float, bracket)
    if curve(lo) > target + tol or curve(hi) < target - tol:
        raise CalibrationError(
            f"case rate {target} not attainable for u in [{lo}, {hi}] "
            f"(rates {curve(lo):.4f} .. {curve(hi):.4f})"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if curve(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    u = hi if abs(curve(hi) - target) <= abs(curve(lo) - target) else lo
    if abs(curve(u) - target) > tol:
        raise CalibrationError(f"bisection ended at rate {curve(u):.4f}, outside {target} +/- {tol}")
    return u


_CALIBRATED: dict = {}


def calibrated(scenario: Scenario, seed: int) -> Scenario:
    """``scenario`` with ``u`` filled in (cached per seed and data-generating setting)."""
    if scenario.u is not None:
        return scenario
    key = (scenario.covariate_setup, scenario.beta, scenario.gamma, scenario.n_t,
           scenario.attendance, scenario.p_c, int(seed))
    if key not in _CALIBRATED:
        _CALIBRATED[key] = calibrate_end_of_study(scenario, scenario.p_c, rng_stream(seed, CALIBRATION_KEY))
    return replace(scenario, u=_CALIBRATED[key])


def cumhaz_l2_distance(fit: FitResult, truth=baseline_cumhaz, num: int = 1000) -> float:
    """L2 distance on ``[sigma, tau]`` between the fitted and a reference cumulative hazard."""
    grid = fit.sieve.grid(num)
    diff = fit.cumhaz(grid) - np.asarray(truth(grid), dtype=float)
    return float(math.sqrt(trapezoid(diff**2, grid)))


def _one_replicate(scenario: Scenario, r: int, B: int, seed: int, fitcfg: FitConfig):
    data = generate_cohort(scenario, rng_stream(seed, r))
    out = {"index": r, "ok": False, "bootstrap_failed": 0}
    try:
        sieve = default_sieve(data, scenario.degree)
        fits = point_fits(data, sieve, fitcfg, scenario.working)
    except Exception as exc:
        out["error"] = str(exc)
        return out
    if not fits.converged:
        out["error"] = "point fit did not converge"
        return out
    try:
        sigma = run_bootstrap(data, fits, BootstrapConfig(B=B, seed=seed), fitcfg, threads=1, key=(r,))
    except BootstrapError as exc:
        out["error"] = str(exc)
        out["bootstrap_failed"] = B
        return out
    upd = update_estimate(fits, sigma)
    out.update(
        ok=True,
        bootstrap_failed=sigma.n_failed,
        zzc=upd.vartheta_hat.tolist(),
        zzc_se=upd.se_original.tolist(),
        proposed=upd.vartheta_bar.tolist(),
        proposed_se=upd.se_updated.tolist(),
        fallback=upd.fallback,
    )
    return out


def _replicate_job(args):
    return _one_replicate(*args)


@dataclass
class ReplicationReport:
    """Bias/SSD/ESE/CP/RE per parameter for the IPW ("ZZC") and update ("Proposed") estimators."""

    scenario: Scenario
    rows: list
    n_replicates: int
    n_used: int
    n_failed: int
    bootstrap_failures: int
    B: int
    seed: int
    wall_time: float = field(default=0.0, compare=False)

    def row(self, method: str, parameter: str = "beta") -> dict:
        for r in self.rows:
            if r["method"] == method and r["parameter"] == parameter:
                return r
        raise KeyError((method, parameter))

    def csv_rows(self):
        for r in self.rows:
            yield [_csv_value(r[c]) for c in REPORT_COLUMNS]

    def to_dict(self) -> dict:
        return {
            "scenario": asdict(self.scenario),
            "rows": self.rows,
            "replicates": self.n_replicates,
            "used": self.n_used,
            "failed": self.n_failed,
            "bootstrap_failures": self.bootstrap_failures,
            "bootstrap": self.B,
            "seed": self.seed,
        }


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _summarise(scenario: Scenario, results, B, seed, wall) -> ReplicationReport:
    good = [r for r in results if r["ok"]]
    truth = scenario.truth
    z = norm.ppf(0.975)
    rows = []
    stats = {}
    for method, est_key, se_key in (("ZZC", "zzc", "zzc_se"), ("Proposed", "proposed", "proposed_se")):
        if len(good) >= 2:
            est = np.array([r[est_key] for r in good])
            se = np.array([r[se_key] for r in good])
            stats[method] = dict(
                bias=est.mean(axis=0) - truth,
                ssd=est.std(axis=0, ddof=1),
                ese=se.mean(axis=0),
                cp=np.mean(np.abs(est - truth) <= z * se, axis=0),
            )
    for method in ("ZZC", "Proposed"):
        for k, name in enumerate(scenario.parameter_names):
            row = {
                "scenario": scenario.name,
                "parameter": name,
                "p_c": scenario.p_c,
                "q_c": scenario.q_c,
                "method": method,
                "rho": None if method == "ZZC" else round(scenario.rho, 2),
                "replicates": len(good),
                "failed": len(results) - len(good),
            }
            if method in stats:
                s = stats[method]
                re = 1.0
                if method == "Proposed":
                    re = float(stats["ZZC"]["ssd"][k] ** 2 / s["ssd"][k] ** 2) if s["ssd"][k] > 0 else math.inf
                row.update(bias=float(s["bias"][k]), ssd=float(s["ssd"][k]), ese=float(s["ese"][k]),
                           cp=float(s["cp"][k]), re=re)
            else:
                row.update(bias=None, ssd=None, ese=None, cp=None, re=None)
            rows.append(row)
    return ReplicationReport(
        scenario=scenario,
        rows=rows,
        n_replicates=len(results),
        n_used=len(good),
        n_failed=len(results) - len(good),
        bootstrap_failures=int(sum(r["bootstrap_failed"] for r in results)),
        B=B,
        seed=seed,
        wall_time=wall,
    )


def run_study(scenario: Scenario, replicates: int, bootcfg: BootstrapConfig = BootstrapConfig(B=100),
              seed: int | None = None, threads: int = 1, fitcfg: FitConfig = FitConfig()) -> ReplicationReport:
    """Simulate ``replicates`` cohorts and summarise both estimators.

    Replicate ``r`` uses stream ``(seed, r)`` and its bootstrap draws
    ``(seed, r, b)``, so the report does not depend on ``threads``.
    ``seed`` defaults to ``bootcfg.seed``.
    """
    seed = bootcfg.seed if seed is None else int(seed)
    start = time.perf_counter()
    scenario = calibrated(scenario, seed)
    jobs = [(scenario, r, bootcfg.B, seed, fitcfg) for r in range(replicates)]
    if threads <= 1:
        results = [_replicate_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(_replicate_job, jobs, chunksize=1))
    return _summarise(scenario, results, bootcfg.B, seed, time.perf_counter() - start)


_SCENARIO_FIELDS = {f.name: f.type for f in fields(Scenario)}
_STUDY_KEYS = {"replicates", "bootstrap", "seed"}


def _coerce(name, text):
    text = text.strip()
    if name in ("covariate_setup", "working", "name"):
        return text
    if name == "u":
        return None if text.lower() in ("", "none", "calibrate") else float(text)
    if name in ("n", "n_t", "degree"):
        return int(text)
    return float(text)


def load_scenarios(path):
    """Parse a scenario file.

    The file is INI-style. ``[study]`` may set ``replicates``, ``bootstrap``
    and ``seed``; every ``[scenario NAME]`` section defines one scenario
    using the :class:`Scenario` field names, with ``[DEFAULT]`` supplying
    shared values. ``rho`` may be given instead of ``sigma_e`` for the
    nominal values 0.95, 0.75 and 0.50.

    Returns
    -------
    (list of Scenario, dict of study settings)
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from None
    study = {}
    for key in _STUDY_KEYS & set(cp.defaults()):
        raise ScenarioError(f"{key!r} belongs in [study], not [DEFAULT]")
    if cp.has_section("study"):
        for key in _STUDY_KEYS:
            if cp.has_option("study", key):
                try:
                    study[key] = int(cp.get("study", key))
                except ValueError:
                    raise ScenarioError(f"[study] {key} must be an integer") from None
    scenarios = []
    for sect in cp.sections():
        if not sect.startswith("scenario"):
            if sect != "study":
                raise ScenarioError(f"unknown section [{sect}]")
            continue
        values = {"name": sect.partition(" ")[2].strip() or sect}
        for key, raw in cp[sect].items():
            if key == "rho":
                rho = float(raw)
                if "sigma_e" not in cp[sect]:
                    match = [s for r, s in RHO_TO_SIGMA.items() if abs(r - rho) < 1e-9]
                    if not match:
                        raise ScenarioError(f"[{sect}] rho={raw}: give sigma_e for non-tabulated correlations")
                    values["sigma_e"] = match[0]
                values["rho_label"] = rho
            elif key in _SCENARIO_FIELDS and key != "rho_label":
                try:
                    values[key] = _coerce(key, raw)
                except ValueError:
                    raise ScenarioError(f"[{sect}] bad value {key}={raw!r}") from None
            else:
                raise ScenarioError(f"[{sect}] unknown key {key!r}")
        scenarios.append(Scenario(**values))
    if not scenarios:
        raise ScenarioError(f"{path}: no [scenario ...] sections")
    return scenarios, study


def write_reports(reports, out_dir, manifest: dict | None = None):
    """Write ``report.csv`` and ``report.json`` under ``out_dir``; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            w.writerows(rep.csv_rows())
    json_path = out_dir / "report.json"
    doc = {"manifest": manifest or {}, "studies": [r.to_dict() for r in reports]}
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
