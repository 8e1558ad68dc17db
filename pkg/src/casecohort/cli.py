"""Command-line interface: ``casecohort {fit,simulate,calibrate}``.

Exit codes: 0 success, 1 invalid input, 2 numerical non-convergence (a
partial report is still written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import __version__
from .bernstein import sieve_from_times
from .dataset import DataError, SamplingDesign, estimate_design, load_dataset
from .estimator import EstimationError, FitConfig
from .likelihood import covariate_names
from .simulation import (
    CALIBRATION_KEY,
    CalibrationError,
    Scenario,
    ScenarioError,
    calibrate_end_of_study,
    case_rate,
    load_scenarios,
    run_study,
    write_reports,
)
from .update import BootstrapConfig, BootstrapError, point_fits, rng_stream, run_bootstrap, update_estimate, default_threads

log = logging.getLogger("casecohort")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGENCE = 0, 1, 2
VERIFY_KEY = 0x5E1F


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(command, config, seed, input_path=None):
    """Reproducible part of a run manifest (no timings, no worker counts)."""
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "input_digest": _digest(input_path) if input_path else None,
    }


def _resolve_config_path(name) -> Path:
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("casecohort") / "data" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise ScenarioError(f"scenario file {name} not found")


def _pvalue(est, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(se > 0, 2.0 * norm.sf(np.abs(est) / se), np.nan)


def _coef_table(names, est, se):
    out = []
    pv = _pvalue(np.asarray(est), np.asarray(se)) if se is not None else [None] * len(names)
    for k, nm in enumerate(names):
        out.append({
            "variable": nm,
            "estimate": float(est[k]),
            "se": None if se is None else float(se[k]),
            "p_value": None if se is None or not np.isfinite(pv[k]) else float(pv[k]),
        })
    return out


def _print_fit_summary(report, stream):
    print(f"n={report['n']}  sampled={report['n_sampled']}  cases={report['n_cases']}  "
          f"q_s={report['design']['q_s']:.4g}  q_c={report['design']['q_c']:.4g}", file=stream)
    head = f"{'Variable':<20}{'ZZC est':>11}{'SE':>9}{'P':>9}   {'Prop. est':>11}{'SE':>9}{'P':>9}"
    print(head, file=stream)
    prop = report.get("proposed") or [{}] * len(report["zzc"])

    def f(v, w, p=4):
        return f"{v:>{w}.{p}f}" if isinstance(v, float) else f"{'-':>{w}}"

    for a, b in zip(report["zzc"], prop):
        print(f"{a['variable']:<20}{f(a['estimate'], 11)}{f(a['se'], 9)}{f(a['p_value'], 9)}   "
              f"{f(b.get('estimate'), 11)}{f(b.get('se'), 9)}{f(b.get('p_value'), 9)}", file=stream)
    if report.get("update_fallback"):
        print("note: working-model contrast has zero variance; Proposed equals ZZC", file=stream)


def cmd_fit(args) -> int:
    start = time.perf_counter()
    try:
        if args.estimate_design:
            # any q_s < 1 admits every sampling pattern; only the indicators are used
            probe = load_dataset(args.input, SamplingDesign(0.5, args.qc))
            design = estimate_design(probe)
        else:
            if args.qs is None:
                raise DataError("--qs is required unless --estimate-design is given")
            design = SamplingDesign(args.qs, args.qc)
        data = load_dataset(args.input, design)
        sieve = sieve_from_times(data.finite_endpoints(), degree=args.degree)
        fitcfg = FitConfig(max_iterations=args.max_iter)
        fits = point_fits(data, sieve, fitcfg, working=args.working)
    except (DataError, EstimationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    config = {
        "input": str(args.input),
        "q_s": design.q_s,
        "q_c": design.q_c,
        "design_estimated": bool(args.estimate_design),
        "degree": args.degree,
        "bootstrap": args.bootstrap,
        "working": fits.working_ipw.spec.value,
        "max_iter": args.max_iter,
        "sigma": sieve.sigma,
        "tau": sieve.tau,
    }
    names = covariate_names(data, fits.main.spec)
    report = {
        "manifest": _manifest("fit", config, args.seed, args.input),
        "n": data.n,
        "n_sampled": int(data.xi.sum()),
        "n_cases": int(data.delta.sum()),
        "design": {"q_s": design.q_s, "q_c": design.q_c},
        "converged": {
            "main": fits.main.converged,
            "working_ipw": fits.working_ipw.converged,
            "working_full": fits.working_full.converged,
        },
        "working_model": {
            "variables": list(fits.working_ipw.names),
            "ipw": fits.working_ipw.vartheta_hat.tolist(),
            "full": fits.working_full.vartheta_hat.tolist(),
        },
        "zzc": _coef_table(names, fits.main.vartheta_hat, None),
        "proposed": None,
        "update_fallback": None,
        "bootstrap": {"requested": args.bootstrap, "used": 0, "failed": 0},
    }
    code = EXIT_OK
    if not fits.converged:
        code = EXIT_NONCONVERGENCE
        report["error"] = "a point fit did not converge"
    else:
        try:
            sigma = run_bootstrap(data, fits, BootstrapConfig(B=args.bootstrap, seed=args.seed),
                                  fitcfg, threads=args.threads)
        except BootstrapError as exc:
            code = EXIT_NONCONVERGENCE
            report["error"] = str(exc)
        else:
            upd = update_estimate(fits, sigma)
            report["zzc"] = _coef_table(names, upd.vartheta_hat, upd.se_original)
            report["proposed"] = _coef_table(names, upd.vartheta_bar, upd.se_updated)
            report["update_fallback"] = upd.fallback
            report["bootstrap"].update(used=sigma.n_replicates_used, failed=sigma.n_failed)
            report["sigma"] = {"sigma11": sigma.sigma11.tolist(), "sigma12": sigma.sigma12.tolist(),
                               "sigma22": sigma.sigma22.tolist()}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    full_manifest = dict(report["manifest"], threads=args.threads, wall_time=time.perf_counter() - start)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        out.with_name(out.stem + ".manifest.json").write_text(json.dumps(full_manifest, indent=2, sort_keys=True) + "\n")
        _print_fit_summary(report, sys.stdout)
    else:
        sys.stdout.write(text)
        _print_fit_summary(report, sys.stderr)
    return code


def _study_settings(args, study):
    replicates = args.replicates if args.replicates is not None else study.get("replicates", 200)
    bootstrap = args.bootstrap if args.bootstrap is not None else study.get("bootstrap", 100)
    seed = args.seed if args.seed is not None else study.get("seed", 0)
    return int(replicates), int(bootstrap), int(seed)


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    try:
        if args.from_manifest:
            old = json.loads(Path(args.from_manifest).read_text())
            old = old.get("manifest", old)
            cfg = old["config"]
            scenarios = [Scenario(**s) for s in cfg["scenarios"]]
            replicates, bootstrap, seed = cfg["replicates"], cfg["bootstrap"], old["seed"]
            source = None
        else:
            if args.config is None:
                raise ScenarioError("a scenario file or --from-manifest is required")
            source = _resolve_config_path(args.config)
            scenarios, study = load_scenarios(source)
            replicates, bootstrap, seed = _study_settings(args, study)
        if replicates < 1:
            raise ScenarioError("--replicates must be positive")
        bootcfg = BootstrapConfig(B=bootstrap, seed=seed)
    except (ScenarioError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    reports = []
    try:
        for sc in scenarios:
            rep = run_study(sc, replicates, bootcfg, seed=seed, threads=args.threads)
            reports.append(rep)
            log.info("scenario %s: %d/%d replicates used in %.1fs", sc.name, rep.n_used, replicates, rep.wall_time)
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    config = {
        "scenarios": [asdict(s) for s in scenarios],
        "resolved_scenarios": [asdict(r.scenario) for r in reports],
        "replicates": replicates,
        "bootstrap": bootstrap,
    }
    manifest = _manifest("simulate", config, seed, source)
    out_dir = Path(args.out_dir)
    write_reports(reports, out_dir, manifest)
    full = dict(manifest, threads=args.threads, wall_time=time.perf_counter() - start,
                scenario_wall_times=[r.wall_time for r in reports])
    (out_dir / "manifest.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")

    print(f"{'scenario':<24}{'param':<7}{'method':<10}{'bias':>8}{'ssd':>8}{'ese':>8}{'cp':>6}{'re':>6}  used/failed")
    for rep in reports:
        for r in rep.rows:
            vals = [r[k] for k in ("bias", "ssd", "ese", "cp", "re")]
            cells = "".join(f"{v:>8.3f}" if v is not None else f"{'-':>8}" for v in vals[:3])
            cells += "".join(f"{v:>6.2f}" if v is not None else f"{'-':>6}" for v in vals[3:])
            print(f"{rep.scenario.name:<24}{r['parameter']:<7}{r['method']:<10}{cells}  {r['replicates']}/{r['failed']}")
        if rep.bootstrap_failures:
            print(f"  ({rep.bootstrap_failures} bootstrap refits dropped)")
    if any(rep.n_used == 0 for rep in reports):
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_calibrate(args) -> int:
    try:
        scenarios, study = load_scenarios(_resolve_config_path(args.config))
        if args.scenario:
            match = [s for s in scenarios if s.name == args.scenario]
            if not match:
                raise ScenarioError(f"no scenario named {args.scenario!r}")
            sc = match[0]
        else:
            sc = scenarios[0]
        target = sc.p_c if args.target_rate is None else args.target_rate
        seed = args.seed if args.seed is not None else study.get("seed", 0)
        u = calibrate_end_of_study(sc, target, rng_stream(seed, CALIBRATION_KEY), n=args.n,
                                   bracket=tuple(args.bracket))
    except (ScenarioError, CalibrationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    achieved = case_rate(sc, u, args.n, rng_stream(seed, CALIBRATION_KEY))
    verify = case_rate(replace(sc, u=u), u, args.verify_n, rng_stream(seed, VERIFY_KEY))
    doc = {"scenario": sc.name, "target_rate": target, "u": u, "achieved_rate": achieved,
           "verification_rate": verify, "seed": seed}
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="casecohort", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit IPW and update estimators to a cohort CSV")
    f.add_argument("input", help="cohort CSV file")
    f.add_argument("--qs", type=float, help="subcohort sampling probability")
    f.add_argument("--qc", type=float, default=1.0, help="case sampling probability outside the subcohort")
    f.add_argument("--estimate-design", action="store_true",
                   help="estimate q_s, q_c from the sampling indicators instead")
    f.add_argument("--degree", type=int, default=3)
    f.add_argument("--bootstrap", type=int, default=500, metavar="B")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--working", choices=("aux", "z"), default="aux")
    f.add_argument("--max-iter", type=int, default=500)
    f.add_argument("--threads", type=int, default=default_threads())
    f.add_argument("--out", help="JSON report path (default: standard output)")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a scenario file")
    s.add_argument("config", nargs="?", help="scenario file (bundled: table1_desk.cfg)")
    s.add_argument("--replicates", type=int)
    s.add_argument("--bootstrap", type=int, metavar="B")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=default_threads())
    s.add_argument("--out-dir", default="sim_out")
    s.add_argument("--from-manifest", help="rerun the study recorded in a manifest or report.json")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="calibrate the end-of-study time to a case rate")
    c.add_argument("config", help="scenario file")
    c.add_argument("--scenario", help="scenario name (default: first)")
    c.add_argument("--target-rate", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--n", type=int, default=50_000, help="subjects per rate evaluation")
    c.add_argument("--verify-n", type=int, default=100_000)
    c.add_argument("--bracket", type=float, nargs=2, default=(0.1, 50.0), metavar=("LO", "HI"))
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_INPUT
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
