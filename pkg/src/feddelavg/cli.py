"""Command-line entry point: simulate, bound, optimal-alpha, sweep and verify.

Exit codes: 0 success, 1 partial sweep failure, 2 configuration or validation
error, 3 numerical failure, 4 bound violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, plots
from .artifacts import write_csv, write_json
from .errors import ConfigError, FedDelAvgError, InvariantError, NumericalError, ParseError
from .fed_sim import write_snapshot_csv, write_trajectory_csv
from .theory import (VERIFICATION_HEADER, BoundParams, bound_report, delta_threshold, increasing_at_one,
                     optimal_alpha, psi_inf, verification_rows, verify_bounds)

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VIOLATION = 0, 1, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
DEFAULT_SUITE = {"suite": {"runs": 20, "seed": 0}, "constants": {}}
TIDY_HEADER = ("run", "alpha", "delta", "k", "test_accuracy", "global_loss")

log = logging.getLogger("feddelavg")


def _say(line: str = ""):
    print(line, flush=True)


def _load(args, *, required: bool = True, default: dict | None = None) -> dict:
    if args.config is None:
        if required:
            raise ConfigError("this command needs --config PATH", "--config")
        return harness.apply_overrides(default or {}, args.set)
    return harness.load_spec_file(args.config, args.set)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- simulate ------------------------------------------------------------------------


def _run_artifacts(result, prepared, out: Path, *, with_metadata: bool = True):
    traj = result.trajectory
    write_trajectory_csv(traj, prepared.problem, out / "trajectory.csv")
    write_snapshot_csv(traj, out / "snapshots.csv")
    if not with_metadata:
        return None
    analysis = harness.analyze(result, prepared, with_reference=True)
    ref = analysis.reference
    meta = {
        "spec": result.spec.to_dict(),
        "sim": result.spec.sim.to_dict(),
        "constants": analysis.constants.to_dict(),
        "reference": None if ref is None else {"loss": ref.loss, "grad_norm": ref.grad_norm, "steps": ref.steps,
                                               "certified": ref.certified},
        "selected_k": traj.selected_k,
        "sync_events": len(traj.sync_events),
        "metrics": [{"k": m.k, "test_accuracy": m.test_accuracy, "global_loss": m.global_loss}
                    for m in result.metrics],
        "partition_hash": result.partition_hash,
        "config_hash": result.config_hash,
    }
    write_json(out / "metadata.json", meta)
    return meta


def cmd_simulate(args) -> int:
    spec = harness.ExperimentSpec.from_dict(_load(args))
    out = _out(args)
    prepared = harness.prepare(spec)
    result = harness.run_experiment(spec, prepared)
    _run_artifacts(result, prepared, out)
    final_acc = result.metrics[result.trajectory.selected_k].test_accuracy
    _say(f"selected k: {result.trajectory.selected_k}")
    _say(f"final accuracy: {'n/a (regression)' if final_acc is None else f'{final_acc:.4f}'}")
    _say(f"final global loss: {result.trajectory.global_losses[result.trajectory.selected_k]:.6g}")
    return EXIT_OK


# -- bound / optimal-alpha -------------------------------------------------------------


def _bound_params(d: dict) -> BoundParams:
    if "bound" in d:
        return BoundParams.from_dict(d["bound"])
    if "constants" in d and "sim" in d:
        return BoundParams.from_metadata(d)
    raise ConfigError("expected a 'bound' object or a simulation metadata file", "<root>")


def cmd_bound(args) -> int:
    params = _bound_params(_load(args))
    report = bound_report(params)
    out = _out(args)
    write_json(out / "bound_report.json", report.to_dict())
    plots.psi_by_k(list(range(1, params.K + 1)), report.psi_by_k, report.epsilon_by_k, out / "bound_psi.png")
    gap = "n/a (phi unavailable)" if report.gap_bound is None else f"{report.gap_bound:.6g}"
    _say(f"gap bound: {gap}")
    _say(f"optimal alpha: {report.optimal_alpha:.6g}")
    return EXIT_OK


def cmd_optimal_alpha(args) -> int:
    params = _bound_params(_load(args))
    a_opt = optimal_alpha(params)
    thr = delta_threshold(params)
    grid = np.round(np.arange(1, 1001) / 1000.0, 3)
    values = [psi_inf(float(a), params) for a in grid]
    out = _out(args)
    write_csv(out / "psi_inf.csv", ("alpha", "psi_inf"), zip(grid.tolist(), values))
    write_json(out / "optimal_alpha.json", {
        "optimal_alpha": a_opt, "psi_inf_at_optimum": psi_inf(a_opt, params), "delta": params.delta,
        "delta_threshold": thr, "monotone_in_alpha": not increasing_at_one(params),
        "notes": [] if params.delta_comm else ["zero delay: alpha = 1 is optimal and the threshold is -inf"]})
    plots.psi_inf_curve(grid, values, out / "psi_inf.png", optimum=a_opt)
    _say(f"optimal alpha: {a_opt:.6g}")
    _say(f"delta threshold: {thr:.6g} (delta = {params.delta:.6g})")
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------------


def _tidy_rows(runs):
    for r in runs:
        if not r.ok:
            continue
        for m in r.result.metrics:
            yield (r.label, r.alpha, r.delta, m.k, m.test_accuracy, m.global_loss)


def _safe(label: str) -> str:
    return label.replace(" ", "_").replace("=", "-")


def _sweep_outputs(kind: str, sweep, out: Path, prepared):
    write_csv(out / f"{kind}_tidy.csv", TIDY_HEADER, _tidy_rows(sweep.runs))
    for r in sweep.runs:
        if r.ok:
            _run_artifacts(r.result, prepared, out / "runs" / kind / _safe(r.label), with_metadata=False)
    series = {r.label: ([m.k for m in r.result.metrics], [m.test_accuracy for m in r.result.metrics])
              for r in sweep.runs if r.ok and r.result.metrics[0].test_accuracy is not None}
    if series:
        plots.accuracy_curves(series, out / f"{kind}_accuracy.png", target=sweep.target)
    else:
        plots.loss_curves({r.label: ([m.k for m in r.result.metrics], [m.global_loss for m in r.result.metrics])
                           for r in sweep.runs if r.ok}, out / f"{kind}_loss.png")


def cmd_sweep(args) -> int:
    spec = harness.ExperimentSpec.from_dict(_load(args))
    if not spec.alpha_grid and not spec.delta_grid:
        raise ConfigError("sweep needs a non-empty alpha_grid or delta_grid", "alpha_grid")
    out = _out(args)
    prepared = harness.prepare(spec)
    failed = 0
    if spec.alpha_grid:
        target = None
        if spec.target_fraction:
            bench = harness.run_experiment(spec.with_sim(alpha=1.0, delta=0), prepared)
            target = spec.target_fraction * harness.final_accuracy(bench)
        sweep = harness.alpha_sweep(spec, target=target, jobs=args.jobs)
        write_csv(out / "alpha_summary.csv", ("run", "alpha", "delta", "first_hit_k", "final_accuracy", "error"),
                  sweep.rows)
        _sweep_outputs("alpha", sweep, out, prepared)
        failed += len(sweep.failed)
        _say(f"alpha sweep at delta={spec.sim.delta}, target accuracy {sweep.target:.4f}")
        for label, _, _, hit, acc, err in sweep.rows:
            _say(f"  {label:<16} first hit k={hit if hit is not None else '-':<4} "
                 f"final acc={'-' if acc is None else f'{acc:.4f}'}{'  FAILED: ' + err if err else ''}")
    if spec.delta_grid:
        comp = harness.delay_comparison(spec, jobs=args.jobs)
        write_csv(out / "delay_summary.csv",
                  ("run", "alpha", "delta", "first_hit_k", "final_accuracy", "overhead", "error"), comp.rows)
        _sweep_outputs("delay", comp, out, prepared)
        failed += len(comp.failed)
        _say(f"delay comparison, target accuracy {comp.target:.4f}")
        for label, _, _, hit, acc, over, err in comp.rows:
            _say(f"  {label:<18} first hit k={hit if hit is not None else '-':<4} "
                 f"overhead={'-' if over is None else f'{over:+.0%}'}{'  FAILED: ' + err if err else ''}")
    if failed:
        _say(f"{failed} run(s) failed")
        return EXIT_PARTIAL
    return EXIT_OK


# -- verify --------------------------------------------------------------------------


def _verify_one(spec, name: str, out: Path):
    prepared = harness.prepare(spec)
    result = harness.run_experiment(spec, prepared)
    analysis = harness.analyze(result, prepared, with_reference=True)
    report = verify_bounds(result.trajectory, analysis.aux, analysis.constants, analysis.reference,
                           prepared.problem, probes=analysis.probes, seed=spec.sim.seed)
    write_csv(out / f"{name}.csv", VERIFICATION_HEADER, verification_rows(report))
    return report


def cmd_verify(args) -> int:
    d = _load(args, required=False, default=DEFAULT_SUITE)
    out = _out(args)
    if "sim" in d:
        jobs = [("verification", harness.ExperimentSpec.from_dict(d))]
    else:
        suite = d.get("suite", {})
        if not isinstance(suite, dict):
            raise ConfigError("expected an object", "suite")
        cases = harness.suite_cases(int(suite.get("runs", 20)), int(suite.get("seed", 0)))
        jobs = [(f"run_{c.index:02d}", harness.suite_spec(c, d.get("constants"))) for c in cases]
    summary, failures = {}, []
    for name, spec in jobs:
        report = _verify_one(spec, name, out)
        s = spec.sim
        summary[name] = {"sim": s.to_dict(), "loss": spec.loss, "passed": report.passed,
                         "measured_gap": report.measured_gap, "constants": report.constants.to_dict(),
                         "checks": report.summary(), "metadata": report.metadata}
        status = "pass" if report.passed else "FAIL"
        _say(f"{name}: {status}  loss={spec.loss} N={s.N} tau={s.tau} delta={s.delta} alpha={s.alpha:g} "
             f"gap={report.measured_gap:.3g}")
        failures += [(name, r) for r in report.failures]
    write_json(out / "verification_summary.json", summary)
    if failures:
        _say(f"{len(failures)} bound violation(s):")
        for name, r in failures:
            _say(f"  {name} {r.check} k={r.k} measured={r.measured:.6g} bound={r.bound:.6g} slack={r.slack:.3g}")
        return EXIT_VIOLATION
    _say("all checks passed")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------

COMMANDS = {"simulate": cmd_simulate, "bound": cmd_bound, "optimal-alpha": cmd_optimal_alpha,
            "sweep": cmd_sweep, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (created if absent)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="dot-path override applied to the config, repeatable")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    common.add_argument("--log-level", choices=sorted(LOG_LEVELS), default="warn")
    parser = argparse.ArgumentParser(prog="feddelavg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"simulate": "run one experiment and write trajectory, snapshot and metadata files",
             "bound": "evaluate the convergence bound for given constants",
             "optimal-alpha": "closed-form optimal synchronization weight",
             "sweep": "alpha and/or delay sweeps with first-hit tables",
             "verify": "check every bound against simulated runs"}
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=LOG_LEVELS[args.log_level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvariantError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FedDelAvgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
