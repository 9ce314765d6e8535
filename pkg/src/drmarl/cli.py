"""Command line interface: verify, solve, train, eval, sweep, plot.

Exit codes: 0 success, 1 failure (checks failed, missing runs, diverged training),
2 configuration error. Relative output paths resolve against $DRMARL_OUTPUT_ROOT.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from . import envs, harness, solver, verify
from .decpomdp import TabularDecPomdp, validate
from .harness import ConfigError, ExperimentConfig
from .uncertainty import AssumptionViolation, parse_set

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load_models(args) -> list[TabularDecPomdp]:
    if args.model:
        return [TabularDecPomdp.load(p) for p in args.model]
    if args.env in ("example_b1", "example_b2"):
        make = envs.example_b1 if args.env == "example_b1" else envs.example_b2
        return [make(v) for v in ("P1", "P2")] if args.set == "finite" else [make(args.variant)]
    if args.env == "random_decpomdp":
        return [envs.random_decpomdp(args.seed)]
    if args.env == "coop_grid":
        return [envs.coop_grid()]
    raise ConfigError("--model or --env is required")


def cmd_solve(args) -> int:
    models = _load_models(args)
    for m in models:
        err = validate(m)
        if err is not None:
            raise ConfigError(f"model: {err}")
    model = models[0]
    try:
        uset = parse_set(args.set, [m.kernel for m in models])
    except ValueError as exc:
        raise ConfigError(f"--set: {exc}") from None
    try:
        q = solver.robust_value_iteration(model, uset, tol=args.tol, general=args.general)
    except AssumptionViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    worst = solver.extract_worst_model(q, model, uset)
    greedy = q.greedy()
    doc = {
        "set": uset.describe(),
        "gamma": model.gamma,
        "actions_per_agent": list(model.actions_per_agent),
        "iterations": q.iterations,
        "residual": q.residual,
        "q": q.values.tolist(),
        "q_normalized": q.normalized().tolist(),
        "greedy": [[int(a) for a in model.joint_action(int(k))] for k in greedy],
        "worst_kernel": worst.tolist(),
    }
    text = json.dumps(doc)
    if args.out:
        out = harness.resolve_output(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"wrote {out}")
    else:
        print(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    rows = verify.run_suites(args.filter)
    if not rows:
        print(f"no suite matches {args.filter!r}", file=sys.stderr)
        return EXIT_CONFIG
    for r in rows:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.suite} ({r.module}): {r.check} -- {r.detail}")
    if args.report:
        print(f"report: {verify.write_report(rows, harness.resolve_output(args.report))}")
    failed = [r for r in rows if not r.passed]
    if failed:
        f = failed[0]
        print(f"first failure: {f.module} module, suite {f.suite}: {f.check}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


def cmd_train(args) -> int:
    exp = ExperimentConfig.load(args.config)
    if args.output_dir:
        exp.output_dir = args.output_dir
    if args.workers:
        exp.workers = args.workers
    records = harness.run_experiment(exp, overwrite=args.overwrite)
    report = harness.report_from_records(records)
    path = report.write_csv(exp.out_path / "train_summary.csv")
    print(f"{len(records)} run records under {exp.out_path / 'runs'}; summary {path}")
    return EXIT_OK if all(r.status == "ok" for r in records) else EXIT_FAIL


def _records_and_specs(args):
    if args.config:
        exp = ExperimentConfig.load(args.config)
        if args.output_dir:
            exp.output_dir = args.output_dir
        return exp, harness.load_records(exp.out_path), exp.eval_envs
    if not args.runs:
        raise ConfigError("--config or --runs is required")
    runs = harness.resolve_output(args.runs)
    exp_file = runs / "experiment.json"
    specs = ExperimentConfig.load(exp_file).eval_envs if exp_file.exists() else None
    return None, harness.load_records(runs), specs


def cmd_eval(args) -> int:
    exp, records, specs = _records_and_specs(args)
    if args.env:
        try:
            specs = [envs.EnvSpec.from_dict(json.loads(e)) for e in args.env]
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"--env: {exc}") from None
    if not specs:
        raise ConfigError("no evaluation environments (use --env or a config)")
    report = harness.evaluate_records(records, specs, episodes=args.episodes)
    base = exp.out_path if exp else harness.resolve_output(args.runs)
    out = harness.resolve_output(args.out) if args.out else base / "eval" / "eval.csv"
    report.write_csv(out)
    for r in report.aggregate:
        print(f"{r.run_id:32s} {r.env:40s} {r.mean_return:8.4f} +- {r.stderr_return:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = ExperimentConfig.load(args.config)
    if args.output_dir:
        exp.output_dir = args.output_dir
    if exp.rho_sweep is None:
        raise ConfigError("rho_sweep: missing (sweep needs a rho list)")
    if args.train:
        harness.run_experiment(exp)
    records = harness.load_records(exp.out_path)
    wanted = {rid for rid, _ in exp.expand()}
    records = [r for r in records if r.run_id in wanted]
    missing = wanted - {r.run_id for r in records}
    if missing:
        print(f"error: missing run records {sorted(missing)[:3]}... (run with --train)", file=sys.stderr)
        return EXIT_FAIL
    report = harness.report_from_records(records)
    points = harness.sweep_report(report, args.env)
    path = harness.write_sweep_csv(points, exp.out_path / "sweep" / "sweep.csv")
    for p in points:
        print(f"{p.env:40s} rho={p.rho:<5g} return {p.mean:8.4f} +- {p.stderr:.4f}  improvement {p.improvement:+.4f}")
    by_env: dict = {}
    for p in points:
        by_env.setdefault(p.env, []).append(p)
    for e, pts in by_env.items():
        shape = harness.rise_then_fall(pts)
        print(f"{e}: rise-then-fall shape {'observed' if shape else 'not observed' if shape is False else 'n/a'}"
              " (reported, not asserted)")
        curve = {"improvement": [(p.rho, p.improvement) for p in pts]}
        svg = harness.svg_line_chart(curve, f"improvement vs rho on {e}", xlabel="rho", ylabel="improvement")
        (path.parent / f"sweep_{harness._slug(e)}.svg").write_text(svg)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_plot(args) -> int:
    runs = harness.resolve_output(args.runs)
    records = harness.load_records(runs)
    out = harness.resolve_output(args.out) if args.out else runs / "plots"
    for p in harness.write_plots(records, out):
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drmarl", description="Distributionally robust cooperative value factorization toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the built-in verification suites")
    p.add_argument("--filter", help="only suites whose name contains this string")
    p.add_argument("--report", help="CSV report path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("solve", help="exact robust value iteration on a tabular model")
    p.add_argument("--model", action="append", help="model JSON file (repeat for a finite set; first is nominal)")
    p.add_argument("--env", choices=envs.ENV_KINDS, help="built-in model instead of --model")
    p.add_argument("--variant", default="P1", help="kernel variant (P1 or P2) for the golden examples")
    p.add_argument("--seed", type=int, default=0, help="seed for random_decpomdp")
    p.add_argument("--set", default="finite", help="contamination:RHO | tv:RHO | finite")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--general", action="store_true", help="keep the minimum-value terms (no fail-state assumption)")
    p.add_argument("--out", help="output JSON path")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train every run of an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--overwrite", action="store_true", help="retrain runs that already have records")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of trained runs on held-out environments")
    p.add_argument("--config")
    p.add_argument("--runs", help="run directory (alternative to --config)")
    p.add_argument("--output-dir")
    p.add_argument("--env", action="append", help="EnvSpec JSON (repeatable); default: the config's eval envs")
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="final return and improvement vs rho")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--env", help="restrict to one evaluation env label")
    p.add_argument("--train", action="store_true", help="train missing sweep runs first")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="learning-curve and robustness-gain CSV/SVG")
    p.add_argument("--runs", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
