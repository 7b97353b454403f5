"""Command-line entry points.

    plsgd run <config.toml> [--out DIR] [--threads K]
    plsgd check
    plsgd report <run-dir>

`run` executes one experiment, writes its CSV artifacts plus a manifest,
and exits 0 only if every in-run invariant check passed. Output files
appear atomically; a failed run leaves a machine-readable failures.json.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

from . import __version__, checks, io
from .config import ExperimentConfig, parse_config
from .errors import PlsgdError
from .experiments import (run_coupled, run_counterexample_demo, run_ensemble,
                          run_risk_balance)
from .optimizer import recursion_check, run_sgd
from .problems import check_landscape

OUT_ROOT_ENV = "PLSGD_OUT_ROOT"


def describe_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except Exception:
        pass
    return __version__


def _slack3(p: float, n: int) -> float:
    return 3.0 * math.sqrt(p * (1.0 - p) / n)


def _run_ensemble(cfg: ExperimentConfig, out: Path, threads):
    problem = cfg.build_problem()
    oracle = cfg.build_oracle()
    schedule = cfg.build_schedule(problem)
    stats = run_ensemble(problem, oracle, schedule, cfg.T, cfg.trials,
                         cfg.deltas, cfg.seed, C1=cfg.C1, C2=cfg.C2)
    failures = []
    if stats.violations:
        failures.append({"check": "recursion", "violations": stats.violations})
    for cp in stats.checkpoints:
        for d in stats.deltas:
            frac = cp.exceed_counts[d] / stats.N
            if frac > d + _slack3(d, stats.N):
                failures.append({"check": "exceedance", "t": cp.t, "delta": d,
                                 "fraction": frac})
        if cp.mgf_stat > math.e * (1.0 + 5.0 / math.sqrt(stats.N)):
            failures.append({"check": "mgf", "t": cp.t, "stat": cp.mgf_stat})
        mean_hi = cp.mean + 2.326 * cp.std / math.sqrt(stats.N)
        if mean_hi > cp.expected:
            failures.append({"check": "expected-bound", "t": cp.t,
                             "mean_upper99": mean_hi, "bound": cp.expected})
    io.write_csv(out / "summary.csv", stats.csv_header(), stats.csv_rows())
    io.write_csv(out / "bounds.csv", stats.bound_report.csv_header(),
                 stats.bound_report.csv_rows())
    if cfg.save_trajectories:
        rows = []
        for i in range(min(cfg.trials, 5)):
            traj = run_sgd(problem, oracle, schedule, cfg.T, trial_id=i,
                           seed=cfg.seed)
            if recursion_check(traj, problem, schedule):
                failures.append({"check": "recursion-trajectory", "trial": i})
            rows.extend(traj.csv_rows())
        io.write_csv(out / "trajectories.csv",
                     ["trial_id", "t", "gap", "grad_norm_sq", "eta", "radius",
                      "inner", "err_norm_sq"], rows)
    return failures, {"checkpoints": len(stats.checkpoints),
                      "violations": stats.violations}


def _run_coupled(cfg: ExperimentConfig, out: Path, threads):
    from .experiments import make_neighbor_pair
    ps = cfg.problem_spec
    pair = make_neighbor_pair(ps["n"], ps["d"], ps["seed"], ps["lambda_r"],
                              label_noise=ps["label_noise"],
                              i_star=cfg.coupling["i_star"],
                              fresh=cfg.coupling["fresh"])
    oracle = cfg.build_oracle()
    schedule = cfg.build_schedule(pair.base)
    stats = run_coupled(pair, oracle, schedule, cfg.T,
                        cfg.coupling["replicates"], cfg.seed, threads=threads)
    failures = []
    if stats.violations:
        failures.append({"check": "growth-bound", "violations": stats.violations})
    if stats.sup_dev_mean > stats.alpha_bound:
        failures.append({"check": "stability-bound", "mean": stats.sup_dev_mean,
                         "alpha": stats.alpha_bound})
    p = stats.b / stats.n
    if abs(stats.hit_rate - p) > 5.0 * math.sqrt(p * (1 - p) / (stats.replicates * stats.T)):
        failures.append({"check": "hit-rate", "rate": stats.hit_rate, "expected": p})
    io.write_csv(out / "coupled.csv", stats.csv_header(), stats.csv_rows())
    return failures, {"sup_dev_mean": stats.sup_dev_mean,
                      "alpha_bound": stats.alpha_bound,
                      "hit_rate": stats.hit_rate}


def _run_risk(cfg: ExperimentConfig, out: Path, threads):
    r = cfg.risk
    dist = cfg.build_risk_distribution()
    reports = run_risk_balance(dist, r["n"], r["b"], r["multipliers"],
                               r["replicates"], r["delta"], cfg.seed,
                               heldout_size=r["heldout"], threads=threads)
    failures = []
    for rep in reports:
        if rep.exceed_frac > rep.delta + _slack3(rep.delta, rep.replicates):
            failures.append({"check": "generalization-exceedance",
                             "multiplier": rep.multiplier,
                             "fraction": rep.exceed_frac})
    io.write_csv(out / "risk.csv", reports[0].csv_header(),
                 (rep.csv_row() for rep in reports))
    return failures, {"multipliers": [rep.multiplier for rep in reports],
                      "exceed_fracs": [rep.exceed_frac for rep in reports]}


def _run_counterexample(cfg: ExperimentConfig, out: Path, threads):
    spec = cfg.build_counterexample()
    demo = run_counterexample_demo(spec, eta=cfg.problem_spec["eta"],
                                   T=cfg.problem_spec["T"])
    failures = []
    if not demo.free_run_minimized:
        failures.append({"check": "free-run", "value": demo.unconstrained.final_value})
    if not demo.projected_run_stuck:
        failures.append({"check": "projected-stall-value",
                         "value": demo.projected.final_value})
    if not demo.stall_located:
        failures.append({"check": "projected-stall-point",
                         "distance": demo.stall_distance})
    report = {
        "radius": spec.radius,
        "stall_target": demo.stall_target.tolist(),
        "free_final_value": demo.unconstrained.final_value,
        "free_final_point": demo.unconstrained.final_point.tolist(),
        "projected_final_value": demo.projected.final_value,
        "projected_final_point": demo.projected.final_point.tolist(),
        "stall_distance": demo.stall_distance,
        "free_run_minimized": demo.free_run_minimized,
        "projected_run_stuck": demo.projected_run_stuck,
        "stall_located": demo.stall_located,
        "dominance_ratio_sample": demo.pl_sample,
    }
    io.write_json(out / "report.json", report)
    for name, run in (("trace_projected.csv", demo.projected),
                      ("trace_free.csv", demo.unconstrained)):
        io.write_csv(out / name, ["t", "x", "y", "value"],
                     ((int(t), p[0], p[1], v)
                      for t, p, v in zip(run.ts, run.points, run.values)))
    return failures, report


def _run_landscape(cfg: ExperimentConfig, out: Path, threads):
    problem = cfg.build_problem()
    radius = getattr(problem, "ball_radius", None) or 3.0
    rep = check_landscape(problem, cfg.trials, radius, cfg.seed)
    failures = []
    if not rep.ok:
        failures.append({"check": "landscape", "violations": rep.violations[:10]})
    rows = [("pl_ratio_min", rep.pl_ratio_min), ("pl_ratio_max", rep.pl_ratio_max),
            ("smooth_ratio_max", rep.smooth_ratio_max),
            ("mu", problem.mu), ("L", problem.L),
            ("n_points", rep.n_points), ("n_violations", len(rep.violations))]
    if rep.qg_ratio_max is not None:
        rows.append(("qg_ratio_max", rep.qg_ratio_max))
    io.write_csv(out / "landscape.csv", ["metric", "value"], rows)
    return failures, {"violations": len(rep.violations)}


_RUNNERS = {"ensemble": _run_ensemble, "coupled": _run_coupled,
            "risk": _run_risk, "counterexample": _run_counterexample,
            "landscape": _run_landscape}


def dispatch(cfg: ExperimentConfig, out_dir, threads=None) -> int:
    """Execute one experiment; returns the process exit status."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    failures, summary = _RUNNERS[cfg.kind](cfg, out, threads)
    manifest = {
        "config": cfg.normalized(),
        "seed": cfg.seed,
        "version": describe_version(),
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "summary": summary,
        "ok": not failures,
    }
    io.write_json(out / "manifest.json", manifest)
    if failures:
        io.write_json(out / "failures.json", failures)
        return 1
    return 0


def _default_out(cfg_path: Path, cfg: ExperimentConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / cfg_path.stem


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
    except PlsgdError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else _default_out(Path(args.config), cfg)
    threads = args.threads or 1
    try:
        status = dispatch(cfg, out, threads)
    except PlsgdError as e:
        print(f"run failed: {e}", file=sys.stderr)
        io.write_json(out / "failures.json", [{"check": "fatal", "error": str(e)}])
        return 1
    if status == 0:
        print(f"ok: artifacts in {out}")
    else:
        print(f"FAILED: see {out / 'failures.json'}", file=sys.stderr)
    return status


def cmd_check(args) -> int:
    failures = checks.run_all()
    if failures:
        print(f"{len(failures)} property check(s) failed", file=sys.stderr)
        return 1
    print("all property checks passed")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        print(f"no manifest in {run_dir}", file=sys.stderr)
        return 2
    manifest = json.loads(manifest_path.read_text())
    kind = manifest["config"]["kind"]
    print(f"experiment: {kind}   seed: {manifest['seed']}   "
          f"version: {manifest['version']}   ok: {manifest['ok']}")
    table = {"ensemble": "summary.csv", "coupled": "coupled.csv",
             "risk": "risk.csv", "landscape": "landscape.csv"}.get(kind)
    if kind == "counterexample":
        rep = json.loads((run_dir / "report.json").read_text())
        print(f"{'fact':<28}{'measured':>16}{'required':>16}")
        print(f"{'free run final value':<28}{rep['free_final_value']:>16.3e}{'<= 1e-6':>16}")
        print(f"{'projected final value':<28}{rep['projected_final_value']:>16.3e}{'>= 1e-3':>16}")
        print(f"{'stall distance':<28}{rep['stall_distance']:>16.3e}{'<= 1e-3':>16}")
        return 0
    if table is None or not (run_dir / table).exists():
        print("nothing to report")
        return 0
    lines = (run_dir / table).read_text().splitlines()
    header = lines[0].split(",")
    widths = [max(14, len(h) + 2) for h in header]
    print("".join(h.rjust(w) for h, w in zip(header, widths)))
    for line in lines[1:]:
        cells = line.split(",")
        out = []
        for c, w in zip(cells, widths):
            try:
                out.append(f"{float(c):.6g}".rjust(w))
            except ValueError:
                out.append(c.rjust(w))
        print("".join(out))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plsgd",
                                     description="SGD bound-validation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--threads", type=int, default=None,
                       help="replicate worker threads (default 1; replicate "
                            "loops are interpreter-bound at desk scale, so "
                            "threads only help when per-replicate linear "
                            "algebra dominates)")
    p_run.set_defaults(fn=cmd_run)
    p_check = sub.add_parser("check", help="run the fast property suite")
    p_check.set_defaults(fn=cmd_check)
    p_rep = sub.add_parser("report", help="print bound-vs-measurement table")
    p_rep.add_argument("run_dir")
    p_rep.set_defaults(fn=cmd_report)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
