"""Workload metrics, plan search, Pareto fronts and hardware scaling studies."""
from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

from .plan import (
    Infeasibility,
    InfeasiblePlanError,
    MemoryFootprint,
    ParallelPlan,
    PlanEntry,
    Strategy,
    per_device_memory,
    structural_violations,
    validate_plan,
)
from .trace import COMM, Timeline, build_streams, exposed_comm, simulate
from .workload import (
    DTYPE_BY_BYTES,
    HW_COMPONENTS,
    ModelArch,
    SpecError,
    SystemSpec,
    TaskSpec,
    layer_fwd_flops,
    scale_hardware,
)

# A100 peaks per datatype, the default normalization reference
A100_PEAK_FLOPS = {"fp32": 156e12, "fp16": 312e12, "fp8": 312e12}

SECONDS_PER_DAY = 86400.0


def compute_dtype(model: ModelArch, task: TaskSpec) -> str:
    """Datatype of the layer that carries the most forward FLOPs."""
    best, best_flops = None, -1.0
    for layer in model.ordered_layers():
        try:
            flops = layer_fwd_flops(layer, 1, task.context_length)
        except SpecError:
            flops = 0.0
        if flops > best_flops:
            best, best_flops = layer, flops
    width = best.activation_precision_bytes if best is not None else 4
    return DTYPE_BY_BYTES[width]


def reference_peak_for(dtype: str) -> float:
    return A100_PEAK_FLOPS[dtype]


@dataclass(frozen=True)
class ReportSummary:
    overlapped_iter_time: float
    serialized_iter_time: float
    compute_time: float
    comm_time: float
    exposed_comm_time: float
    throughput: float
    unit: str
    exposed_comm_fraction: float
    serialized_breakdown: Mapping[str, float]
    collective_breakdown: Mapping[str, float]
    exposed_breakdown: Mapping[str, float]
    memory: MemoryFootprint
    normalized_gpu_hours_per_unit_work: float
    devices: int
    global_batch: int
    work_per_iteration: float

    @property
    def mqps(self) -> float:
        return self.throughput / 1e6

    def to_dict(self) -> dict[str, Any]:
        return {
            "overlapped_iter_time_ms": self.overlapped_iter_time * 1e3,
            "serialized_iter_time_ms": self.serialized_iter_time * 1e3,
            "compute_time_ms": self.compute_time * 1e3,
            "comm_time_ms": self.comm_time * 1e3,
            "exposed_comm_time_ms": self.exposed_comm_time * 1e3,
            "exposed_comm_fraction": self.exposed_comm_fraction,
            f"throughput_{self.unit}_per_s": self.throughput,
            "unit": self.unit,
            "serialized_breakdown_ms": {k: v * 1e3 for k, v in sorted(self.serialized_breakdown.items())},
            "collective_breakdown_ms": {k: v * 1e3 for k, v in sorted(self.collective_breakdown.items())},
            "exposed_breakdown_ms": {k: v * 1e3 for k, v in sorted(self.exposed_breakdown.items())},
            "memory_bytes": self.memory.to_dict(),
            f"normalized_gpu_hours_per_{self.unit[:-1]}": self.normalized_gpu_hours_per_unit_work,
            "devices": self.devices,
            "global_batch": self.global_batch,
        }


def summarize(
    timeline: Timeline,
    model: ModelArch,
    plan: ParallelPlan,
    task: TaskSpec,
    system: SystemSpec,
    reference_peak: float | None = None,
) -> ReportSummary:
    trace = timeline.trace
    serial: dict[str, float] = {}
    colls: dict[str, float] = {}
    compute = comm = 0.0
    for e in trace.events:
        serial[e.kind] = serial.get(e.kind, 0.0) + e.duration
        if e.stream == COMM:
            colls[e.kind] = colls.get(e.kind, 0.0) + e.duration
            comm += e.duration
        else:
            compute += e.duration
    exposed = exposed_comm(timeline)
    overlapped = timeline.makespan
    work = task.work_per_iteration
    throughput = work / overlapped if overlapped > 0 else float("inf")
    dtype = compute_dtype(model, task)
    if reference_peak is None:
        reference_peak = reference_peak_for(dtype)
    width = next(w for w, d in DTYPE_BY_BYTES.items() if d == dtype)
    peak = system.device.peak_for(width)
    device_hours = overlapped * system.total_devices / 3600.0 / work
    return ReportSummary(
        overlapped_iter_time=overlapped,
        serialized_iter_time=compute + comm,
        compute_time=compute,
        comm_time=comm,
        exposed_comm_time=exposed.total,
        throughput=throughput,
        unit=task.unit,
        exposed_comm_fraction=exposed.total / comm if comm > 0 else 0.0,
        serialized_breakdown=serial,
        collective_breakdown=colls,
        exposed_breakdown=exposed.by_kind(trace),
        memory=per_device_memory(model, plan, task, system),
        normalized_gpu_hours_per_unit_work=normalized_gpu_hours(device_hours, peak, reference_peak),
        devices=system.total_devices,
        global_batch=task.global_batch,
        work_per_iteration=work,
    )


@dataclass(frozen=True)
class TrainingDuration:
    steps: float
    days: float
    device_hours: float


def training_duration(summary: ReportSummary, task: TaskSpec, steps: float | None = None) -> TrainingDuration:
    """Wall-clock days and aggregate device-hours for ``task.total_work`` (or ``steps`` iterations)."""
    if steps is None:
        if task.total_work is None:
            raise SpecError("task has no total_work to project", "total_work")
        steps = task.total_work / summary.work_per_iteration
    days = steps * summary.overlapped_iter_time / SECONDS_PER_DAY
    return TrainingDuration(steps, days, days * 24.0 * summary.devices)


def normalized_gpu_hours(device_hours: float, device_peak: float, reference_peak: float) -> float:
    if not (device_peak > 0 and reference_peak > 0):
        raise ValueError("peaks must be positive")
    return device_hours * device_peak / reference_peak


# ---------------------------------------------------------------------------
# Plan evaluation


@dataclass(frozen=True)
class PlanResult:
    plan: ParallelPlan
    summary: ReportSummary | None
    feasible: bool
    memory: MemoryFootprint | None
    infeasibility: Infeasibility | None = None

    @property
    def name(self) -> str:
        return self.plan.name

    @property
    def throughput(self) -> float:
        return self.summary.throughput if self.summary is not None else 0.0


def evaluate(
    model: ModelArch,
    plan: ParallelPlan,
    task: TaskSpec,
    system: SystemSpec,
    *,
    ignore_memory: bool = False,
    reference_peak: float | None = None,
) -> tuple[PlanResult, Timeline | None]:
    report = validate_plan(model, plan, task, system)
    if report is not None and report.kind == "structural":
        return PlanResult(plan, None, False, None, report), None
    mem = per_device_memory(model, plan, task, system)
    if report is not None and not ignore_memory:
        return PlanResult(plan, None, False, mem, report), None
    timeline = simulate(build_streams(model, plan, task, system, check_memory=False))
    summary = summarize(timeline, model, plan, task, system, reference_peak)
    return PlanResult(plan, summary, report is None, mem, report), timeline


def evaluate_plan(model, plan, task, system, *, ignore_memory=False, reference_peak=None) -> PlanResult:
    return evaluate(model, plan, task, system, ignore_memory=ignore_memory, reference_peak=reference_peak)[0]


# ---------------------------------------------------------------------------
# Search


@dataclass(frozen=True)
class SearchDomain:
    """Candidate plan entries per layer group."""

    options: Mapping[str, tuple[PlanEntry, ...]]
    fsdp_prefetch: bool = False

    def __post_init__(self):
        if not self.options:
            raise SpecError("search domain is empty", "search")
        for group, entries in self.options.items():
            if not entries:
                raise SpecError("no candidate strategies", f"search.{group}")

    @classmethod
    def product(
        cls,
        groups: Sequence[str],
        intra: Sequence[Strategy] = (Strategy.DDP, Strategy.FSDP, Strategy.TP),
        inter: Sequence[Strategy] | None = None,
        **pinned: PlanEntry,
    ) -> "SearchDomain":
        inter = intra if inter is None else inter
        opts = {g: tuple(PlanEntry(a, b) for a in intra for b in inter) for g in groups}
        opts.update({g: (e,) for g, e in pinned.items()})
        return cls(opts)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {g: [e.to_dict() for e in self.options[g]] for g in sorted(self.options)}
        if self.fsdp_prefetch:
            out["fsdp_prefetch"] = True
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], path: str = "search") -> "SearchDomain":
        if not isinstance(d, Mapping):
            raise SpecError("expected an object", path)
        opts: dict[str, tuple[PlanEntry, ...]] = {}
        for group, value in d.items():
            if group == "fsdp_prefetch":
                continue
            where = f"{path}.{group}"
            if isinstance(value, Mapping) and "shard" not in value:
                intra = [Strategy.parse(s, f"{where}.intra") for s in value.get("intra", ())]
                inter = [Strategy.parse(s, f"{where}.inter") for s in value.get("inter", ())]
                entries = [PlanEntry(a, b) for a in intra for b in inter]
                exclude = {PlanEntry.from_dict(x, f"{where}.exclude") for x in value.get("exclude", ())}
                entries = [e for e in entries if e not in exclude]
            elif isinstance(value, Mapping):
                entries = [PlanEntry.from_dict(value, where)]
            elif isinstance(value, list):
                entries = [PlanEntry.from_dict(v, f"{where}[{i}]") for i, v in enumerate(value)]
            else:
                raise SpecError("expected a strategy list or object", where)
            if not entries:
                raise SpecError("no candidate strategies", where)
            opts[group] = tuple(entries)
        return cls(opts, bool(d.get("fsdp_prefetch", False)))


def enumerate_plans(
    model: ModelArch,
    system: SystemSpec,
    task: TaskSpec,
    domain: SearchDomain,
    constraint: Callable[[ParallelPlan], bool] | None = None,
) -> list[ParallelPlan]:
    """Structurally valid plans of the domain's Cartesian product, in a fixed order."""
    groups = sorted(domain.options)
    plans = []
    for combo in itertools.product(*(domain.options[g] for g in groups)):
        plan = ParallelPlan(dict(zip(groups, combo)), fsdp_prefetch=domain.fsdp_prefetch)
        if constraint is not None and not constraint(plan):
            continue
        if structural_violations(model, plan, task, system):
            continue
        plans.append(plan)
    return plans


OBJECTIVES = ("throughput", "gpu-hours", "exposed")


def _rank_key(objective: str) -> Callable[[PlanResult], tuple]:
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")

    def key(r: PlanResult) -> tuple:
        s = r.summary
        if objective == "throughput":
            score = -s.throughput
        elif objective == "gpu-hours":
            score = s.normalized_gpu_hours_per_unit_work
        else:
            score = s.exposed_comm_fraction
        return (score, r.memory.total, r.name)

    return key


class NoFeasiblePlanError(RuntimeError):
    def __init__(self, results: Sequence[PlanResult]):
        self.results = list(results)
        lines = [f"{r.name}: {r.infeasibility.message}" for r in results if r.infeasibility is not None]
        super().__init__("no feasible plan in the search domain" + ("\n  " + "\n  ".join(lines) if lines else ""))


def _evaluate_star(args) -> PlanResult:
    model, plan, task, system, ignore_memory, reference_peak = args
    return evaluate_plan(model, plan, task, system, ignore_memory=ignore_memory, reference_peak=reference_peak)


def evaluate_all(
    model: ModelArch,
    plans: Sequence[ParallelPlan],
    task: TaskSpec,
    system: SystemSpec,
    *,
    ignore_memory: bool = False,
    reference_peak: float | None = None,
    jobs: int = 1,
) -> list[PlanResult]:
    """Results in the same order as ``plans``."""
    work = [(model, p, task, system, ignore_memory, reference_peak) for p in plans]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_evaluate_star, work))
    return [_evaluate_star(w) for w in work]


def rank(results: Sequence[PlanResult], objective: str = "throughput") -> list[PlanResult]:
    timed = [r for r in results if r.summary is not None]
    return sorted(timed, key=_rank_key(objective))


def search_optimal(
    model: ModelArch,
    system: SystemSpec,
    task: TaskSpec,
    domain: SearchDomain,
    objective: str = "throughput",
    *,
    ignore_memory: bool = False,
    reference_peak: float | None = None,
    jobs: int = 1,
) -> list[PlanResult]:
    """Every timed plan of the domain, best first.

    Out-of-memory plans are dropped unless ``ignore_memory`` is set, in which
    case they are timed anyway and kept with ``feasible=False``.
    """
    plans = enumerate_plans(model, system, task, domain)
    if not plans:
        raise SpecError("search domain has no structurally valid plan", "search")
    results = evaluate_all(
        model, plans, task, system, ignore_memory=ignore_memory, reference_peak=reference_peak, jobs=jobs
    )
    ranked = rank(results, objective)
    if not ranked:
        raise NoFeasiblePlanError(results)
    return ranked


def pareto_frontier(results: Sequence[PlanResult]) -> list[PlanResult]:
    """Results not dominated in (lower memory, higher throughput), sorted by memory."""
    if not results:
        raise ValueError("no results")
    pts = [r for r in results if r.summary is not None]
    ordered = sorted(pts, key=lambda r: (r.memory.total, -r.throughput, r.name))
    front: list[PlanResult] = []
    best = float("-inf")
    for r in ordered:
        if r.throughput > best:
            front.append(r)
            best = r.throughput
        elif front and (r.memory.total, r.throughput) == (front[-1].memory.total, front[-1].throughput):
            # exact ties dominate nothing and are not dominated
            front.append(r)
    return front


# ---------------------------------------------------------------------------
# Hardware scaling


@dataclass(frozen=True)
class ScaleRow:
    component: str
    factor: float
    iter_time: float
    throughput: float
    speedup: float
    plan: str


def scale_study(
    model: ModelArch,
    system: SystemSpec,
    task: TaskSpec,
    plan: ParallelPlan | None = None,
    *,
    domain: SearchDomain | None = None,
    factors: Sequence[float] = (10.0,),
    components: Sequence[str] = HW_COMPONENTS,
    ignore_memory: bool = False,
    jobs: int = 1,
) -> list[ScaleRow]:
    """Speedup from scaling each hardware component, then all together.

    With a ``domain`` the best plan is searched again on every scaled system;
    otherwise ``plan`` is held fixed.
    """
    if (plan is None) == (domain is None):
        raise ValueError("give exactly one of plan or domain")
    for f in factors:
        if not f > 0:
            raise SpecError(f"scale factor must be > 0, got {f!r}", "factors")

    def best(sys: SystemSpec) -> PlanResult:
        if domain is not None:
            return search_optimal(model, sys, task, domain, ignore_memory=ignore_memory, jobs=jobs)[0]
        result = evaluate_plan(model, plan, task, sys, ignore_memory=ignore_memory)
        if result.summary is None:
            raise InfeasiblePlanError(result.infeasibility)
        return result

    base = best(system)
    rows = []
    cases = [(c, {c: f}) for f in factors for c in components]
    cases += [("all", {c: f for c in components}) for f in factors]
    for name, scale in cases:
        r = best(scale_hardware(system, scale))
        factor = next(iter(scale.values()))
        rows.append(
            ScaleRow(
                name,
                factor,
                r.summary.overlapped_iter_time,
                r.throughput,
                r.throughput / base.throughput,
                r.name,
            )
        )
    return rows
