"""Command-line front end.

Exit codes: 0 success, 1 runtime or parse error, 2 assumption-check
failure or command-line usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .graph import (
    DEFAULT_ENUMERATION_CAP,
    ResourceLimitError,
    check_identifiability,
    check_topology,
    load_graph,
    reduced_graph_count,
    sample_topology,
)
from .signals import ModelError, load_model
from .sim import (
    MIN_FIT_ROUNDS,
    AssumptionCheckFailed,
    ScenarioError,
    TraceFormatError,
    TraceTable,
    fit_quadratic,
    load_scenario,
    read_trace_csv,
    run_scenario,
    write_trace_csv,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ASSUMPTION = 2

LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

log = logging.getLogger("byzlearn")


def _configure_logging() -> None:
    name = os.environ.get("BYZLEARN_LOG", "warn").lower()
    level = LOG_LEVELS.get(name)
    logging.basicConfig(level=level or logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if level is None:
        log.warning("ignoring BYZLEARN_LOG=%r; expected one of %s", name, sorted(LOG_LEVELS))


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _witness_text(checks: dict) -> str:
    topo = checks.get("topology") or {}
    if topo.get("witness"):
        return "witness reduced graph: " + json.dumps(topo["witness"], sort_keys=True)
    ident = checks.get("identifiability") or {}
    if ident.get("worst"):
        return "non-identifying source component: " + json.dumps(ident["worst"], sort_keys=True)
    return "assumption check failed"


def _seed_list(text: str) -> list[int]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("seed list is empty")
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}: {exc}") from None


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {value}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _load(args, seed: int | None = None):
    config = load_scenario(args.scenario)
    if seed is not None:
        config.seed = seed
    if getattr(args, "rounds", None) is not None:
        config.rounds = args.rounds
    if getattr(args, "force", False):
        config.force = True
    return config


def _run_one(config, out: Path) -> dict:
    result = run_scenario(config)
    out.mkdir(parents=True, exist_ok=True)
    write_trace_csv(result.trace, out / "trace.csv")
    _dump(result.summary, out / "summary.json")
    return result.summary


def cmd_run(args) -> int:
    config = _load(args, args.seed)
    out = Path(args.out)
    try:
        summary = _run_one(config, out)
    except AssumptionCheckFailed as exc:
        print(f"assumption check failed for {config.name!r}: {_witness_text(exc.checks)}", file=sys.stderr)
        return EXIT_ASSUMPTION
    print(f"wrote {out / 'trace.csv'} and {out / 'summary.json'}")
    print(f"success: {summary['success']}  decision round: {summary['decision_round']}  "
          f"final diameter: {summary['diameter']['final']:.3g}")
    return EXIT_OK


def cmd_check_graph(args) -> int:
    g = load_graph(args.graph)
    report: dict = {"n": g.n, "f": args.f, "dim": args.dim}
    if args.sample is not None:
        refuted, witness = sample_topology(g, args.f, args.dim, args.sample, seed=args.seed)
        report["mode"] = "sample"
        report["samples"] = args.sample
        report["chi"] = reduced_graph_count(g, args.f, args.dim)
        report["refuted"] = refuted
        report["witness"] = None if witness is None else witness.to_dict()
        passed = not refuted
        print(json.dumps(report, indent=2, sort_keys=True))
        if refuted:
            print("FAIL: sampled reduced graph has several source components", file=sys.stderr)
        else:
            print(f"no counterexample in {args.sample} samples (one-sided check, not a proof)", file=sys.stderr)
        return EXIT_OK if passed else EXIT_ASSUMPTION
    try:
        topo = check_topology(g, args.f, args.dim, cap=args.cap)
    except ResourceLimitError as exc:
        print(f"error: {exc}; rerun with --sample K", file=sys.stderr)
        return EXIT_ERROR
    report["mode"] = "exact"
    report["topology"] = topo.to_dict()
    passed = topo.assumption_holds
    if args.model is not None:
        model = load_model(args.model)
        if passed:
            ident = check_identifiability(g, args.f, args.dim, model, cap=args.cap)
            worst = min(ident.entries, key=lambda e: e["kl_sum"]) if ident.entries else None
            report["identifiability"] = {"holds": ident.holds, "min_kl_sum": ident.min_kl_sum, "worst": worst}
            passed = ident.holds
        else:
            report["identifiability"] = None
    report["passed"] = passed
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    if not passed:
        print(f"FAIL: {_witness_text(report)}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_ASSUMPTION


def _sweep_task(scenario: str, seed: int, rounds, force: bool, out: str) -> dict:
    ns = argparse.Namespace(scenario=scenario, rounds=rounds, force=force)
    config = _load(ns, seed)
    try:
        summary = _run_one(config, Path(out) / f"seed-{seed}")
    except AssumptionCheckFailed as exc:
        return {"seed": seed, "status": "assumption", "error": _witness_text(exc.checks)}
    except Exception as exc:  # reported per seed, never aborts the sweep
        return {"seed": seed, "status": "error", "error": f"{type(exc).__name__}: {exc}"}
    return {
        "seed": seed,
        "status": "ok",
        "success": summary["success"],
        "decision_round": summary["decision_round"],
        "final_diameter": summary["diameter"]["final"],
        "fits": summary["fits"],
    }


def _distribution(values: list[float]) -> dict | None:
    if not values:
        return None
    arr = np.asarray(values, dtype=float)
    return {
        "count": int(arr.size),
        "min": float(arr.min()),
        "median": float(np.median(arr)),
        "max": float(arr.max()),
    }


def aggregate(rows: list[dict]) -> dict:
    """Sweep aggregate: success fraction, median decision round, fit distributions."""
    ok = [r for r in rows if r["status"] == "ok"]
    judged = [r for r in ok if r["success"] is not None]
    wins = sum(1 for r in judged if r["success"])
    rounds = [r["decision_round"] for r in judged if r["decision_round"] is not None]
    fits = [fit for r in ok for fit in r["fits"]]
    return {
        "seeds": len(rows),
        "completed": len(ok),
        "failed": [{"seed": r["seed"], "status": r["status"], "error": r["error"]} for r in rows if r["status"] != "ok"],
        "success": wins,
        "success_fraction": wins / len(judged) if judged else None,
        "median_decision_round": statistics.median(rounds) if rounds else None,
        "fits": {
            "a": _distribution([fit["a"] for fit in fits]),
            "r2": _distribution([fit["r2"] for fit in fits]),
            "negative_a_fraction": (sum(fit["a"] < 0 for fit in fits) / len(fits)) if fits else None,
        },
        "per_seed": [
            {k: r.get(k) for k in ("seed", "status", "success", "decision_round", "final_diameter")}
            for r in rows
        ],
    }


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _load(args)  # validate the scenario before spawning work
    jobs = [(str(args.scenario), s, args.rounds, args.force, str(out)) for s in args.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_task, *zip(*jobs)))
    else:
        rows = [_sweep_task(*job) for job in jobs]
    agg = aggregate(rows)
    _dump(agg, out / "aggregate.json")
    print(f"{'seed':>8}  {'status':<10} {'success':<8} decision_round")
    for r in rows:
        print(f"{r['seed']:>8}  {r['status']:<10} {str(r.get('success')):<8} {r.get('decision_round')}")
    print(f"success {agg['success']}/{len(agg['per_seed'])}  median decision round {agg['median_decision_round']}")
    if any(r["status"] == "assumption" for r in rows):
        return EXIT_ASSUMPTION
    if agg["failed"]:
        return EXIT_ERROR
    return EXIT_OK


def _infer_truth(table: TraceTable, labels: list[str]) -> str:
    """True hypothesis for a trace without a summary: the one the agents favour at the end."""
    if table.kind == "log_belief":
        score = {h: np.mean([table.values[(a, h)][-1] for a in table.agents]) for h in labels}
    else:
        score = {
            h: min(np.mean([table.values[(a, f"{h}|{o}")][-1] for a in table.agents]) for o in labels if o != h)
            for h in labels
        }
    return max(labels, key=lambda h: score[h])


def _labels(table: TraceTable) -> list[str]:
    if table.kind == "ratio":
        return list(dict.fromkeys(k.split("|")[0] for k in table.keys))
    return list(table.keys)


def report_fits(table: TraceTable, theta_star: str) -> list[dict]:
    """Decay fits per (agent, wrong hypothesis) over the trailing half of the trace."""
    start = table.rounds // 2
    t = np.arange(start, table.rounds + 1)
    rows = []
    for agent in table.agents:
        for h in _labels(table):
            if h == theta_star:
                continue
            if table.kind == "ratio":
                y = -table.values[(agent, f"{theta_star}|{h}")]
            else:
                y = table.values[(agent, h)]
            fit = fit_quadratic(t, y[start:])
            rows.append({"agent": agent, "theta": h, **fit.to_dict()})
    return rows


def _write_plots(table: TraceTable, directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    rounds = np.arange(table.rounds + 1)
    for agent in table.agents:
        keys = [k for k in table.keys if (agent, k) in table.values]
        cols = np.column_stack([rounds] + [table.values[(agent, k)] for k in keys])
        path = directory / f"agent-{agent}.dat"
        header = "round " + " ".join(k.replace(" ", "_") for k in keys)
        np.savetxt(path, cols, header=header, fmt="%.17g")
        written.append(path)
    path = directory / "diameter.dat"
    np.savetxt(path, np.column_stack([rounds, table.diameters]), header="round diameter", fmt="%.17g")
    written.append(path)
    return written


def cmd_report(args) -> int:
    path = Path(args.trace)
    table = read_trace_csv(path)
    print(f"trace {path}: {table.kind} records, {table.rounds} rounds, agents {table.agents}")
    print(f"diameter: initial {table.diameters[0]:.6g}  final {table.diameters[-1]:.6g}")
    if args.plots is not None:
        for p in _write_plots(table, Path(args.plots)):
            print(f"wrote {p}")
    if table.kind == "value":
        return EXIT_OK
    labels = _labels(table)
    summary_path = path.with_name("summary.json")
    theta_star = None
    if summary_path.exists():
        theta_star = json.loads(summary_path.read_text()).get("theta_star")
    if theta_star not in labels:
        theta_star = _infer_truth(table, labels)
        print(f"no summary beside the trace; taking {theta_star!r} as the true hypothesis")
    if table.rounds < MIN_FIT_ROUNDS:
        print(f"insufficient data: {table.rounds} rounds, decay fits need at least {MIN_FIT_ROUNDS}")
        return EXIT_OK
    print(f"decay fits (trailing half), true hypothesis {theta_star}:")
    print(f"{'agent':>6} {'theta':>8} {'a':>14} {'b':>14} {'c':>14} {'R2':>8}")
    for r in report_fits(table, theta_star):
        print(f"{r['agent']:>6} {r['theta']:>8} {r['a']:>14.6g} {r['b']:>14.6g} {r['c']:>14.6g} {r['r2']:>8.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="byzlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=_nonneg)
    p.add_argument("--out", default="byzlearn-out")
    p.add_argument("--force", action="store_true", help="run even if assumption checks fail")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check-graph", help="check reduced-graph topology and identifiability")
    p.add_argument("--graph", required=True)
    p.add_argument("--f", type=_nonneg, required=True)
    p.add_argument("--dim", type=_positive, required=True)
    p.add_argument("--model")
    p.add_argument("--sample", type=_positive, help="one-sided randomized check with K samples")
    p.add_argument("--seed", type=int, default=0, help="seed for --sample")
    p.add_argument("--cap", type=_positive, default=DEFAULT_ENUMERATION_CAP)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_check_graph)

    p = sub.add_parser("sweep", help="run a scenario for several seeds")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seeds", type=_seed_list, required=True)
    p.add_argument("--jobs", type=_positive, default=1)
    p.add_argument("--rounds", type=_nonneg)
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarise a trace CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--plots", help="directory for gnuplot-compatible .dat files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ModelError, TraceFormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ResourceLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
