"""Command-line front end.

Exit codes: 0 success, 1 infeasible plan(s), 2 input error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    OBJECTIVES,
    NoFeasiblePlanError,
    evaluate,
    evaluate_plan,
    pareto_frontier,
    scale_study,
    search_optimal,
    training_duration,
)
from .io import (
    InputError,
    breakdown_csv,
    dumps,
    load_model,
    load_system,
    load_task,
    report_dict,
    scale_csv,
    sweep_header,
    sweep_rows,
    csv_text,
    write_text,
)
from .plan import InfeasiblePlanError
from .trace import StructuralError, to_chrome_trace
from .workload import SpecError

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model JSON path or fixture name")
    p.add_argument("--system", required=True, help="system JSON path or fixture name")
    p.add_argument("--task", required=True, help="task JSON path or fixture name")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--ignore-memory", action="store_true", help="time plans that exceed device memory")
    p.add_argument("--prefetch", action="store_true", help="enable FSDP AllGather prefetching")
    p.add_argument("--objective", choices=OBJECTIVES, default="throughput")
    p.add_argument("--reference-peak", type=float, default=None, metavar="FLOPS",
                   help="peak FLOP/s that GPU-hours are normalized to (default: A100)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel plan evaluations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madmax", description="Analytical performance model for distributed ML.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate the plan in the task file")
    _common(run)
    run.add_argument("--trace", action="store_true", help="also write timeline.trace.json")

    sweep = sub.add_parser("sweep", help="evaluate every plan of the task file's search domain")
    _common(sweep)

    scale = sub.add_parser("scale-study", help="speedups from scaling hardware components")
    _common(scale)
    scale.add_argument("--factors", type=float, nargs="+", default=None, help="scale factors (default: task file)")
    scale.add_argument("--fixed-plan", action="store_true", help="hold the task file's plan instead of re-searching")

    export = sub.add_parser("export-trace", help="write the simulated timeline as Chrome trace JSON")
    _common(export)
    return parser


def _with_prefetch(plan, args):
    if plan is not None and args.prefetch and not plan.fsdp_prefetch:
        from dataclasses import replace

        return replace(plan, fsdp_prefetch=True)
    return plan


def _load(args):
    model = load_model(args.model)
    system = load_system(args.system)
    tf = load_task(args.task)
    try:
        tf.task.check_model(model)
    except SpecError as exc:
        raise InputError(str(exc.with_source(args.task))) from None
    return model, system, tf


def _durations(summary, tf):
    out = {}
    if tf.task.total_work is not None:
        out["total_work"] = training_duration(summary, tf.task)
    if tf.steps is not None:
        out["steps"] = training_duration(summary, tf.task, steps=tf.steps)
    return out


def cmd_run(args, *, trace_only: bool = False) -> int:
    model, system, tf = _load(args)
    if tf.plan is None:
        raise InputError(f"{args.task}: plan: missing (the task file only has a search domain)")
    plan = _with_prefetch(tf.plan, args)
    result, timeline = evaluate(
        model, plan, tf.task, system, ignore_memory=args.ignore_memory, reference_peak=args.reference_peak
    )
    out = Path(args.out)
    if result.summary is None:
        print(f"infeasible plan {plan.name}: {result.infeasibility.message}", file=sys.stderr)
        if not trace_only:
            write_text(out / "report.json", dumps(report_dict(
                None, plan, model=model.name, system=system.name, infeasibility=result.infeasibility)))
        return EXIT_INFEASIBLE
    if trace_only:
        write_text(out / "timeline.trace.json", dumps(to_chrome_trace(timeline, model.name)))
        return EXIT_OK
    report = report_dict(
        result.summary,
        plan,
        model=model.name,
        system=system.name,
        infeasibility=result.infeasibility,
        durations=_durations(result.summary, tf),
    )
    write_text(out / "report.json", dumps(report))
    write_text(out / "breakdown.csv", breakdown_csv(result.summary, timeline.trace))
    if getattr(args, "trace", False):
        write_text(out / "timeline.trace.json", dumps(to_chrome_trace(timeline, model.name)))
    s = result.summary
    print(
        f"{plan.name}: iteration {s.overlapped_iter_time * 1e3:.6g} ms "
        f"(serialized {s.serialized_iter_time * 1e3:.6g} ms), "
        f"{s.throughput:.6g} {s.unit}/s, exposed comm {s.exposed_comm_fraction * 100:.4g}%"
    )
    return EXIT_OK if result.feasible else EXIT_INFEASIBLE


def _domain(tf, args):
    if tf.search is None:
        raise InputError(f"{args.task}: search: missing (the task file has no strategy domain)")
    domain = tf.search
    if args.prefetch and not domain.fsdp_prefetch:
        from dataclasses import replace

        domain = replace(domain, fsdp_prefetch=True)
    return domain


def cmd_sweep(args) -> int:
    model, system, tf = _load(args)
    domain = _domain(tf, args)
    try:
        ranked = search_optimal(
            model, system, tf.task, domain, args.objective,
            ignore_memory=args.ignore_memory, reference_peak=args.reference_peak, jobs=args.jobs,
        )
    except NoFeasiblePlanError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INFEASIBLE
    base_tp = None
    if tf.baseline is not None:
        base = evaluate_plan(model, _with_prefetch(tf.baseline, args), tf.task, system,
                             ignore_memory=args.ignore_memory, reference_peak=args.reference_peak)
        base_tp = base.throughput or None
    unit = tf.task.unit
    rows = sweep_rows(ranked, base_tp)
    front = {r.name for r in pareto_frontier(ranked)}
    by_name = {r.name: r for r in ranked}
    pareto = sorted((row for row in rows if row[1] in front),
                    key=lambda row: (by_name[row[1]].memory.total, -by_name[row[1]].throughput, row[1]))
    out = Path(args.out)
    write_text(out / "sweep.csv", csv_text(sweep_header(unit), rows))
    write_text(out / "pareto.csv", csv_text(sweep_header(unit), pareto))
    best = ranked[0]
    print(f"{len(ranked)} plans evaluated; best: {best.name} ({best.throughput:.6g} {unit}/s)")
    return EXIT_OK


def cmd_scale_study(args) -> int:
    model, system, tf = _load(args)
    factors = tuple(args.factors) if args.factors else tf.scale_factors
    for f in factors:
        if not f > 0:
            raise InputError(f"--factors: scale factor must be > 0, got {f!r}")
    if args.fixed_plan or tf.search is None:
        if tf.plan is None:
            raise InputError(f"{args.task}: needs a plan or a search domain")
        kw = {"plan": _with_prefetch(tf.plan, args)}
    else:
        kw = {"domain": _domain(tf, args)}
    try:
        rows = scale_study(model, system, tf.task, factors=factors, components=tf.scale_components,
                           ignore_memory=args.ignore_memory, jobs=args.jobs, **kw)
    except (InfeasiblePlanError, NoFeasiblePlanError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INFEASIBLE
    write_text(Path(args.out) / "scale.csv", scale_csv(rows, tf.task.unit))
    for r in rows:
        print(f"{r.component} x{r.factor:g}: speedup {r.speedup:.4g}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    if args.reference_peak is not None and not args.reference_peak > 0:
        parser.error("--reference-peak must be > 0")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "scale-study":
            return cmd_scale_study(args)
        return cmd_run(args, trace_only=True)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StructuralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
