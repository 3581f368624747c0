"""Command line: ``fjord gen | optimize | run | bench | calibrate | model validate``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Sequence

from . import expr as ex
from .bench import run_bench
from .benefit import LogisticModel, ablation, accuracy, benefit_dataset, train_logistic
from .cost_model import CostConfig, calibrate_op_costs, microbench
from .engine import execute, exact_columns, rewrite, verify
from .factorize import analyze
from .inference import ModelBundle
from .join_tree import validate_plan
from .optimizers import STRATEGIES, GeneticConfig, OptimizeOptions, benefit_gate, optimize
from .relational import write_csv
from .workload import MODELS, Workload, WorkloadConfig, gen_workload, star_speedup_workload


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("FJORD_SEED", "")
    return int(env) if env.strip() else 0


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ints(text: str) -> int | tuple[int, ...]:
    parts = [int(p) for p in text.split(",") if p.strip()]
    return parts[0] if len(parts) == 1 else tuple(parts)


def _config(args) -> CostConfig:
    mult = {}
    if getattr(args, "cost_table", None):
        mult = json.loads(Path(args.cost_table).read_text())["multipliers"]
    return CostConfig(lam=args.lam, multipliers=mult, aggregate=not args.no_aggregate)


def _options(args, wl: Workload | None = None) -> OptimizeOptions:
    cfg = _config(args)
    opts = OptimizeOptions(config=cfg, genetic=GeneticConfig(seed=_seed(args.seed)), threshold=args.threshold)
    if args.benefit_gate and wl is not None:
        model = LogisticModel.load(args.benefit_gate)
        tree = wl.join_tree()
        opts.gate = benefit_gate(model, tree, analyze(wl.graph, tree, wl.column_dims, wl.models), cfg)
    return opts


def _add_opt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="optimizer seed (default: $FJORD_SEED or 0)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="weight of the I/O term")
    p.add_argument("--threshold", type=float, default=0.0, help="greedy commit threshold on the cost delta")
    p.add_argument("--benefit-gate", metavar="MODEL", default=None, help="benefit model JSON gating greedy pushes")
    p.add_argument("--cost-table", metavar="JSON", default=None, help="calibrated op multipliers")
    p.add_argument("--no-aggregate", action="store_true", help="carry partial results side by side")


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    seed = _seed(args.seed)
    if args.preset == "star-speedup":
        wl = star_speedup_workload(seed=seed)
    else:
        cfg = WorkloadConfig(
            n_tables=args.tables, shape=args.shape, fact_rows=args.rows, fanout=_ints(args.fanout),
            features=_ints(args.features), distribution=args.distribution, model=args.model,
            layers=args.layers, neurons=_ints(args.neurons) if args.neurons else None, trees=args.trees,
            seed=seed,
        )
        wl = gen_workload(cfg)
    wl.save(args.out)
    rows = {n: t.row_count for n, t in wl.tables.items()}
    print(f"wrote {len(wl.tables)} tables to {args.out}: {rows}")
    return 0


def cmd_optimize(args) -> int:
    wl = Workload.load(args.workload)
    tree = wl.join_tree()
    fmap = analyze(wl.graph, tree, wl.column_dims, wl.models)
    rep = optimize(args.strategy, tree, fmap, _options(args, wl))
    out = rep.to_json(timings=False)
    out["seed"] = _seed(args.seed)
    _dump(Path(args.out), out)
    print(json.dumps(rep.to_json(timings=True), sort_keys=True))
    return 0


def cmd_run(args) -> int:
    wl = Workload.load(args.workload)
    tree = wl.join_tree()
    fmap = analyze(wl.graph, tree, wl.column_dims, wl.models)
    opts = _options(args, wl)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if args.plan:
        plan = tuple(json.loads(Path(args.plan).read_text())["plan"])
        if not validate_plan(tree, plan, fmap.homes()):
            print(f"invalid: plan {list(plan)} is not valid for this workload", file=sys.stderr)
            return 2
        strategy = "given"
    else:
        rep = optimize(args.strategy, tree, fmap, opts)
        plan, strategy = rep.plan, args.strategy
        _dump(out / "plan.json", dict(rep.to_json(timings=False), seed=_seed(args.seed)))
    opt_time = time.perf_counter() - t0
    agg = opts.config.aggregate
    result, metrics = execute(rewrite(tree, plan, fmap, wl.models, agg), wl.tables, args.threads, opts.config,
                              strategy, _seed(args.seed))
    metrics.optimize_time = opt_time
    reference, _ = execute(rewrite(tree, optimize("none", tree, fmap, opts).plan, fmap, wl.models, agg), wl.tables,
                           args.threads, opts.config, "none")
    check = verify(result, reference, args.rel_tol, exact_columns(wl.graph))
    write_csv(result, out / "result.csv")
    _dump(out / "metrics.json", dict(metrics.to_json(timings=True), verify=check.to_json()))
    status = "PASS" if check.passed else "FAIL"
    print(f"{strategy}: plan {''.join(map(str, plan))} rows {metrics.rows[tree.root]} "
          f"time {metrics.total_time:.4f}s verify {status} (max rel {check.max_rel:.2e})")
    return 0 if check.passed else 1


def cmd_bench(args) -> int:
    seed = _seed(args.seed)
    queries: list[tuple[str, Workload]] = []
    if args.workloads:
        queries = [(Path(d).name, Workload.load(d)) for d in args.workloads]
    else:
        models = args.models.split(",")
        for q in range(args.queries):
            m = args.min_tables + q % (args.max_tables - args.min_tables + 1)
            cfg = WorkloadConfig(n_tables=m, shape=args.shape, fact_rows=args.rows, fanout=args.fanout,
                                 features=max(args.features, m), model=models[q % len(models)], seed=seed + q)
            queries.append((f"q{q:03d}", gen_workload(cfg)))
    strategies = args.strategies.split(",")
    for s in strategies:
        if s not in STRATEGIES:
            raise SystemExit(f"unknown strategy {s!r}")
    opts = _options(args)
    report = run_bench(queries, strategies, opts, threads=args.threads, repeats=args.repeats, rel_tol=args.rel_tol)
    report.write(args.out)
    print(report.table())
    bad = [r for r in report.rows if not (r.status == "ok" and r.verified)]
    for r in bad:
        print(f"failed: {r.query} {r.strategy} {r.error or 'verification'}", file=sys.stderr)
    return 0 if report.all_verified else 1


def cmd_calibrate(args) -> int:
    seed = _seed(args.seed)
    out = Path(args.out)
    t0 = time.perf_counter()
    cal = calibrate_op_costs(microbench(seed=seed, repeats=args.repeats))
    cal_time = time.perf_counter() - t0
    _dump(out / "cost_table.json", {"multipliers": cal.multipliers, "relative_residuals": cal.residuals, "points": cal.points,
                                    "unit": "ns per flop"})
    x, y = benefit_dataset(args.samples, seed)
    cut = int(0.8 * len(y))
    model = train_logistic(x[:cut], y[:cut])
    model.save(out / "benefit_model.json")
    print("op multipliers (ns/flop): " + ", ".join(f"{k}={v:.3g}" for k, v in sorted(cal.multipliers.items())))
    print(f"benefit model held-out accuracy {accuracy(model, x[cut:], y[cut:]):.3f}")
    print(f"calibration time {cal_time:.3f}s (offline, not part of query latency)")
    if args.ablation:
        for k, v in ablation(args.samples, seed).items():
            print(f"  {'all factors' if k == 'all' else 'without ' + k:<26} {v:.3f}")
    return 0


def cmd_model_validate(args) -> int:
    path = Path(args.path)
    try:
        if path.is_dir():
            wl = Workload.load(path)
            problems = wl.models.validate()
            if problems:
                raise ValueError("; ".join(problems))
            tree = wl.join_tree()
            dims = ex.infer_dims(wl.graph, wl.column_dims, wl.models)
            fmap = analyze(wl.graph, tree, wl.column_dims, wl.models)
            print(f"workload ok: {len(wl.tables)} tables, {tree.size} join-tree nodes, "
                  f"{len(fmap.units)} factorized units, outputs {[(o, dims[o]) for o in wl.graph.outputs]}")
            return 0
        obj = json.loads(path.read_text())
        if "multipliers" in obj:
            bad = {k: v for k, v in obj["multipliers"].items() if not (isinstance(v, (int, float)) and v >= 0)}
            if bad:
                raise ValueError(f"negative or non-numeric multipliers: {bad}")
            print(f"cost table ok: {sorted(obj['multipliers'])}")
            return 0
        if "terms" in obj:
            model = LogisticModel.from_json(obj)
            x, y = benefit_dataset(args.samples, _seed(args.seed) + 1)
            print(f"benefit model ok: {len(model.terms)} terms, accuracy on fresh samples {accuracy(model, x, y):.3f}")
            return 0
        problems = ModelBundle.from_json(obj).validate()
        if problems:
            raise ValueError("; ".join(problems))
        print(f"model bundle ok: {', '.join(k for k, v in obj.items() if v)}")
        return 0
    except (OSError, KeyError, TypeError, ValueError, ex.ExprError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fjord", description="Factorized model inference inside join trees.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic workload")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["star-speedup"], default=None)
    p.add_argument("--tables", type=int, default=3)
    p.add_argument("--shape", choices=["star", "snowflake"], default="star")
    p.add_argument("--rows", type=int, default=10_000, help="fact table rows")
    p.add_argument("--fanout", default="10", help="one value or one per dimension table")
    p.add_argument("--features", default="30", help="total features or one count per table")
    p.add_argument("--distribution", choices=["uniform", "zipf"], default="uniform")
    p.add_argument("--model", choices=list(MODELS), default="ffnn")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--neurons", default=None)
    p.add_argument("--trees", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("optimize", help="choose a push-down plan")
    p.add_argument("workload")
    p.add_argument("--strategy", choices=list(STRATEGIES), default="greedy")
    p.add_argument("--out", default="plan.json")
    _add_opt_flags(p)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("run", help="optimize, execute and verify against no push-down")
    p.add_argument("workload")
    p.add_argument("--strategy", choices=list(STRATEGIES), default="greedy")
    p.add_argument("--plan", default=None, help="plan.json to execute instead of optimizing")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--out", default="run")
    _add_opt_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench", help="run strategies over a query suite")
    p.add_argument("workloads", nargs="*", help="workload directories (default: generate a suite)")
    p.add_argument("--strategies", default="none,full,greedy,genetic,morpheus-bu,fl-bu")
    p.add_argument("--queries", type=int, default=6)
    p.add_argument("--min-tables", type=int, default=2)
    p.add_argument("--max-tables", type=int, default=6)
    p.add_argument("--models", default="ffnn,qs,pq")
    p.add_argument("--shape", choices=["star", "snowflake"], default="star")
    p.add_argument("--rows", type=int, default=10_000)
    p.add_argument("--fanout", type=int, default=10)
    p.add_argument("--features", type=int, default=30)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--out", default="bench")
    _add_opt_flags(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("calibrate", help="fit op cost multipliers and train the benefit model")
    p.add_argument("--out", default=".")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--ablation", action="store_true", help="also report per-factor ablation accuracy")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("model", help="model file utilities")
    msub = p.add_subparsers(dest="model_command", required=True)
    v = msub.add_parser("validate", help="check a workload directory, model bundle, cost table or benefit model")
    v.add_argument("path")
    v.add_argument("--samples", type=int, default=500)
    v.add_argument("--seed", type=int, default=None)
    v.set_defaults(fn=cmd_model_validate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return int(args.fn(args))


if __name__ == "__main__":
    sys.exit(main())
