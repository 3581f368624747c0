"""Benchmark runner: optimize, execute and verify every (query, strategy) cell."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .engine import RunMetrics, execute, exact_columns, rewrite, verify
from .factorize import analyze
from .optimizers import OptimizeOptions, optimize
from .workload import Workload

REPEATS = 3

# columns that are identical across runs with the same seeds
REPORT_COLUMNS = ("query", "tables", "strategy", "status", "verified", "max_rel", "plan", "cost",
                  "plans_evaluated", "root_rows", "total_bytes", "error")
TIMING_COLUMNS = ("query", "strategy", "optimize_time", "execute_time", "total_time", "speedup_vs_none",
                  "cumulative_time")


@dataclass
class BenchRow:
    query: str
    tables: int
    strategy: str
    status: str = "ok"
    verified: bool = False
    max_rel: float = 0.0
    plan: tuple[int, ...] = ()
    cost: float = 0.0
    plans_evaluated: int = 0
    root_rows: int = 0
    total_bytes: int = 0
    error: str = ""
    optimize_time: float = 0.0
    execute_time: float = 0.0
    speedup_vs_none: float = float("nan")
    cumulative_time: float = 0.0
    metrics: RunMetrics | None = None

    @property
    def total_time(self) -> float:
        return self.optimize_time + self.execute_time

    def record(self, timings: bool) -> dict:
        out = {
            "query": self.query, "tables": self.tables, "strategy": self.strategy, "status": self.status,
            "verified": int(self.verified), "max_rel": f"{self.max_rel:.3e}", "plan": "".join(map(str, self.plan)),
            "cost": f"{self.cost:.6g}", "plans_evaluated": self.plans_evaluated, "root_rows": self.root_rows,
            "total_bytes": self.total_bytes, "error": self.error,
        }
        if timings:
            out.update({
                "optimize_time": f"{self.optimize_time:.6f}", "execute_time": f"{self.execute_time:.6f}",
                "total_time": f"{self.total_time:.6f}", "speedup_vs_none": f"{self.speedup_vs_none:.3f}",
                "cumulative_time": f"{self.cumulative_time:.6f}",
            })
        return out


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    @property
    def all_verified(self) -> bool:
        return all(r.status == "ok" and r.verified for r in self.rows)

    def _csv(self, columns: Sequence[str], timings: bool) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r.record(timings))
        return buf.getvalue()

    def report_csv(self) -> str:
        return self._csv(REPORT_COLUMNS, timings=False)

    def timings_csv(self) -> str:
        return self._csv(TIMING_COLUMNS, timings=True)

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.csv").write_text(self.report_csv())
        (d / "timings.csv").write_text(self.timings_csv())

    def table(self) -> str:
        head = f"{'query':<12} {'m':>3} {'strategy':<12} {'ok':<4} {'max_rel':>9} {'total_s':>9} {'speedup':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            ok = "yes" if r.status == "ok" and r.verified else "NO"
            lines.append(f"{r.query:<12} {r.tables:>3} {r.strategy:<12} {ok:<4} {r.max_rel:>9.2e} "
                         f"{r.total_time:>9.4f} {r.speedup_vs_none:>8.2f}")
        return "\n".join(lines)


def run_bench(queries: Sequence[tuple[str, Workload]], strategies: Sequence[str],
              options: OptimizeOptions | None = None, threads: int = 1, repeats: int = REPEATS,
              rel_tol: float = 1e-4) -> BenchReport:
    """Run every strategy on every query, smallest queries first.

    Each cell is optimized and executed ``repeats`` times and the median wall
    times are kept; the result of the last repetition is verified against
    the no-push-down result. A failing cell is recorded and the run goes on.
    """
    options = options or OptimizeOptions()
    report = BenchReport()
    ordered = sorted(queries, key=lambda q: (len(q[1].tables), q[0]))
    cumulative = {s: 0.0 for s in strategies}
    for name, wl in ordered:
        tree = wl.join_tree()
        fmap = analyze(wl.graph, tree, wl.column_dims, wl.models)
        exact = exact_columns(wl.graph)
        reference = None
        cells: list[BenchRow] = []
        for strategy in ("none",) + tuple(s for s in strategies if s != "none"):
            row = BenchRow(name, len(wl.tables), strategy)
            try:
                opt_t, exe_t = [], []
                for _ in range(max(1, repeats)):
                    t0 = time.perf_counter()
                    rep = optimize(strategy, tree, fmap, options)
                    opt_t.append(time.perf_counter() - t0)
                    rp = rewrite(tree, rep.plan, fmap, wl.models, options.config.aggregate)
                    t0 = time.perf_counter()
                    result, metrics = execute(rp, wl.tables, threads, options.config, strategy, options.genetic.seed)
                    exe_t.append(time.perf_counter() - t0)
                row.plan, row.cost, row.plans_evaluated = rep.plan, rep.cost, rep.plans_evaluated
                row.optimize_time, row.execute_time = statistics.median(opt_t), statistics.median(exe_t)
                metrics.optimize_time = row.optimize_time
                row.metrics = metrics
                row.root_rows = metrics.rows[tree.root]
                row.total_bytes = sum(metrics.bytes_moved.values())
                if strategy == "none":
                    reference = result
                if reference is None:
                    raise RuntimeError("no-push-down reference failed")
                v = verify(result, reference, rel_tol, exact)
                row.verified, row.max_rel = v.passed, v.max_rel
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the run
                row.status, row.error = "failed", f"{type(exc).__name__}: {exc}"
            cells.append(row)
        base = cells[0].total_time if cells[0].status == "ok" else float("nan")
        for row in cells:
            if row.strategy == "none" and "none" not in strategies:
                continue
            if row.status == "ok" and row.total_time > 0:
                row.speedup_vs_none = base / row.total_time
            cumulative[row.strategy] += row.total_time
            row.cumulative_time = cumulative[row.strategy]
            report.rows.append(row)
    return report

