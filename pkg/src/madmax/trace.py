"""Per-device compute/communication streams and their two-stream schedule."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable

from .cost import collective_time, compute_time, lookup_time
from .plan import (
    CollectiveReq,
    InfeasiblePlanError,
    ParallelPlan,
    is_trainable,
    local_batch,
    required_collectives,
    validate_plan,
)
from .workload import (
    ModelArch,
    SystemSpec,
    TaskSpec,
    embedding_lookup_bytes,
    is_embedding,
    layer_fwd_flops,
)

COMPUTE = "compute"
COMM = "comm"


class StructuralError(ValueError):
    """The trace cannot be scheduled (cyclic or inconsistent ordering)."""


@dataclass(frozen=True)
class Event:
    id: int
    stream: str
    duration: float
    deps: frozenset[int] = frozenset()
    blocking: bool = False
    layer: str = ""
    phase: str = "forward"
    # "compute", "lookup", "igrad", "wgrad" or a collective name
    kind: str = "compute"
    magnitude: float = 0.0
    role: str = ""

    @property
    def label(self) -> str:
        return f"{self.layer}:{self.phase}:{self.kind}"


@dataclass(frozen=True)
class DeviceTrace:
    events: tuple[Event, ...]
    compute_order: tuple[int, ...]
    comm_order: tuple[int, ...]

    def __post_init__(self):
        ids = [e.id for e in self.events]
        if len(set(ids)) != len(ids):
            raise StructuralError("duplicate event ids")
        by_stream = {COMPUTE: set(), COMM: set()}
        for e in self.events:
            if e.stream not in by_stream:
                raise StructuralError(f"unknown stream {e.stream!r}")
            if e.duration < 0:
                raise StructuralError(f"event {e.id} has negative duration")
            by_stream[e.stream].add(e.id)
            missing = e.deps - set(ids)
            if missing:
                raise StructuralError(f"event {e.id} depends on unknown events {sorted(missing)}")
        if sorted(self.compute_order) != sorted(by_stream[COMPUTE]):
            raise StructuralError("compute issue order does not match compute events")
        if sorted(self.comm_order) != sorted(by_stream[COMM]):
            raise StructuralError("comm issue order does not match comm events")

    def event(self, eid: int) -> Event:
        return self._index[eid]

    @property
    def _index(self) -> dict[int, Event]:
        return {e.id: e for e in self.events}

    def without_comm(self) -> "DeviceTrace":
        """Same trace with every communication event removed."""
        comm = set(self.comm_order)
        index = self._index

        def resolve(deps):
            out = set()
            for d in deps:
                if d in comm:
                    out |= resolve(index[d].deps)
                else:
                    out.add(d)
            return out

        events = tuple(
            replace(e, deps=frozenset(resolve(e.deps))) for e in self.events if e.id not in comm
        )
        return DeviceTrace(events, self.compute_order, ())


@dataclass(frozen=True)
class Timeline:
    trace: DeviceTrace
    start: dict[int, float]
    end: dict[int, float]

    @property
    def makespan(self) -> float:
        return max(self.end.values(), default=0.0)

    def busy(self, stream: str) -> list[tuple[float, float]]:
        order = self.trace.compute_order if stream == COMPUTE else self.trace.comm_order
        return [(self.start[i], self.end[i]) for i in order if self.end[i] > self.start[i]]


@dataclass(frozen=True)
class Step:
    layer: str
    phase: str
    # backward only: produce weight gradients / input gradients
    weight_grad: bool = False
    input_grad: bool = False


def build_execution_order(model: ModelArch, task: TaskSpec) -> list[Step]:
    """Forward pass in execution order, then the backward pass reversed."""
    steps = [Step(lid, "forward") for lid in model.execution_order]
    if not task.training:
        return steps
    for lid in reversed(model.execution_order):
        layer = model.layer(lid)
        trainable = is_trainable(layer, task)
        igrad = not is_embedding(layer)
        if trainable or igrad:
            steps.append(Step(lid, "backward", weight_grad=trainable, input_grad=igrad))
    return steps


class _Builder:
    def __init__(self):
        self.events: list[Event] = []
        self.compute: list[int] = []
        self.keys: dict[int, int] = {}

    def add(self, stream, duration, deps, order_deps=None, **kw) -> int:
        eid = len(self.events)
        deps = frozenset(d for d in deps if d is not None)
        if order_deps is None:
            order_deps = deps
        self.events.append(Event(eid, stream, duration, deps, **kw))
        if stream == COMPUTE:
            self.keys[eid] = len(self.compute)
            self.compute.append(eid)
        else:
            # comm events queue at the point their last dependency is issued
            self.keys[eid] = max((self.keys[d] for d in order_deps), default=-1)
        return eid

    def trace(self) -> DeviceTrace:
        comm = [e.id for e in self.events if e.stream == COMM]
        # parameter gathers only wait on compute, so they can jump ahead of
        # gradient reductions released by the same compute event
        comm.sort(key=lambda i: (self.keys[i], self.events[i].role != "param_gather", i))
        return DeviceTrace(tuple(self.events), tuple(self.compute), tuple(comm))


def build_streams(
    model: ModelArch, plan: ParallelPlan, task: TaskSpec, system: SystemSpec, *, check_memory: bool = True
) -> DeviceTrace:
    """Dependency-annotated event streams for one representative device."""
    report = validate_plan(model, plan, task, system)
    if report is not None and (check_memory or report.kind != "oom"):
        raise InfeasiblePlanError(report)
    task.check_model(model)

    opts = task.options
    device = system.device
    batch = local_batch(task, system)
    ctx = task.context_length
    b = _Builder()

    colls: dict[tuple[str, str], list[CollectiveReq]] = {}
    for layer in model.layers:
        for req in required_collectives(layer, plan.entry_for(layer), task, system, batch, prefetch=plan.fsdp_prefetch):
            colls.setdefault((layer.id, req.phase), []).append(req)

    def comm(req: CollectiveReq, deps, order_deps=None) -> int:
        return b.add(
            COMM,
            collective_time(req, system),
            deps,
            order_deps,
            blocking=req.blocking,
            layer=req.source_layer,
            phase=req.phase,
            kind=req.kind.value,
            magnitude=req.bytes_per_device,
            role=req.role,
        )

    # last compute event of each visited step, for FSDP gather issue points
    visit_last: list[int] = []

    def gather(req: CollectiveReq) -> int:
        # prefetch relaxes the dependency by one layer but keeps the queue
        # position, so the schedule can only get earlier
        issue = visit_last[-1:]
        deps = visit_last[-2:-1] if plan.fsdp_prefetch else issue
        return comm(req, deps, issue)

    steps = build_execution_order(model, task)
    ready_fwd: dict[str, list[int]] = {}
    ready_bwd: dict[str, list[int]] = {}
    outputs = [lid for lid in model.execution_order if not model.consumers_of(lid)]

    for step in steps:
        layer = model.layer(step.layer)
        reqs = colls.get((layer.id, step.phase), [])
        pre_gather = [r for r in reqs if r.role == "param_gather"]
        routing = [r for r in reqs if r.role == "routing"]
        label = dict(layer=layer.id, phase=step.phase)

        if step.phase == "forward":
            ins = [e for src in model.inputs_of(layer.id) for e in ready_fwd[src]]
            gathers = [gather(r) for r in pre_gather]
            routes = [comm(r, ins) for r in routing]
            gate = ins + gathers + [r for r, req in zip(routes, routing) if req.blocking]
            last = None
            if is_embedding(layer):
                nbytes = embedding_lookup_bytes(layer, batch) * opts.lookup_skew
                last = b.add(COMPUTE, lookup_time(nbytes, device), gate, kind="lookup", magnitude=nbytes, **label)
            flops = layer_fwd_flops(layer, batch, ctx)
            if flops > 0 or last is None:
                prec = layer.activation_precision_bytes
                deps = gate if last is None else [last]
                last = b.add(COMPUTE, compute_time(flops, device, prec), deps, kind="compute", magnitude=flops, **label)
            visit_last.append(last)
            ready = [last]
            for req in reqs:
                if req.role in ("activation", "pooled"):
                    ev = comm(req, ready)
                    if req.blocking:
                        ready = [ev]
            ready_fwd[layer.id] = ready
            continue

        consumers = model.consumers_of(layer.id)
        if consumers:
            grad_in = [e for c in consumers for e in ready_bwd.get(c, ())]
        else:
            grad_in = [e for out in outputs for e in ready_fwd[out]]
        gathers = [gather(r) for r in pre_gather]
        pre = [comm(r, grad_in) for r in routing + [r for r in reqs if r.role == "pooled"]]
        blocking_pre = [e for e in pre if b.events[e].blocking]
        gate = grad_in + gathers + blocking_pre
        bwd_flops = layer_fwd_flops(layer, batch, ctx) * opts.backward_flops_factor
        prec = layer.activation_precision_bytes
        last = None
        ready = []
        if step.input_grad:
            flops = bwd_flops * (1.0 - opts.wgrad_fraction)
            last = b.add(COMPUTE, compute_time(flops, device, prec), gate, kind="igrad", magnitude=flops, **label)
            ready = [last]
            for req in reqs:
                if req.role == "activation":
                    ev = comm(req, [last])
                    if req.blocking:
                        ready = [ev]
        if step.weight_grad:
            deps = gate if last is None else [last]
            if is_embedding(layer):
                nbytes = embedding_lookup_bytes(layer, batch) * opts.lookup_skew * opts.backward_lookup_factor
                last = b.add(COMPUTE, lookup_time(nbytes, device), deps, kind="lookup", magnitude=nbytes, **label)
                deps = [last]
            flops = bwd_flops * opts.wgrad_fraction
            if flops > 0 or last is None:
                last = b.add(COMPUTE, compute_time(flops, device, prec), deps, kind="wgrad", magnitude=flops, **label)
            for req in reqs:
                if req.role == "grad_reduce":
                    comm(req, [last])
        visit_last.append(last)
        ready_bwd[layer.id] = ready
    return b.trace()


def simulate(trace: DeviceTrace) -> Timeline:
    """List-schedule both streams in issue order, each event as early as possible."""
    index = trace._index
    orders = {COMPUTE: list(trace.compute_order), COMM: list(trace.comm_order)}
    pos = {COMPUTE: 0, COMM: 0}
    free = {COMPUTE: 0.0, COMM: 0.0}
    start: dict[int, float] = {}
    end: dict[int, float] = {}
    remaining = len(trace.events)
    while remaining:
        progressed = False
        for stream in (COMPUTE, COMM):
            order = orders[stream]
            while pos[stream] < len(order):
                e = index[order[pos[stream]]]
                if not all(d in end for d in e.deps):
                    break
                t = max([free[stream]] + [end[d] for d in e.deps])
                start[e.id] = t
                end[e.id] = t + e.duration
                free[stream] = end[e.id]
                pos[stream] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            heads = [orders[s][pos[s]] for s in (COMPUTE, COMM) if pos[s] < len(orders[s])]
            raise StructuralError(f"dependency cycle or ordering deadlock at events {heads}")
    return Timeline(trace, start, end)


def _subtract(interval: tuple[float, float], covers: list[tuple[float, float]]) -> float:
    s, e = interval
    uncovered = e - s
    for cs, ce in covers:
        lo, hi = max(s, cs), min(e, ce)
        if hi > lo:
            uncovered -= hi - lo
    return uncovered


@dataclass(frozen=True)
class ExposedComm:
    total: float
    by_event: dict[int, float] = field(default_factory=dict)

    def by_kind(self, trace: DeviceTrace) -> dict[str, float]:
        out: dict[str, float] = {}
        index = trace._index
        for eid, t in self.by_event.items():
            kind = index[eid].kind
            out[kind] = out.get(kind, 0.0) + t
        return out


def exposed_comm(timeline: Timeline) -> ExposedComm:
    """Time the comm stream is busy while the compute stream idles."""
    compute = timeline.busy(COMPUTE)
    by_event = {}
    for eid in timeline.trace.comm_order:
        s, e = timeline.start[eid], timeline.end[eid]
        if e > s:
            # compute events never overlap each other, so subtracting each is exact
            by_event[eid] = _subtract((s, e), compute)
        else:
            by_event[eid] = 0.0
    return ExposedComm(sum(by_event.values()), by_event)


def to_chrome_trace(timeline: Timeline, name: str = "device0") -> dict:
    """Chrome Trace Event document: one process, threads "compute" and "comm"."""
    tids = {COMPUTE: 0, COMM: 1}
    events: list[dict] = [
        {"name": "process_name", "ph": "M", "pid": 0, "tid": 0, "args": {"name": name}},
        {"name": "thread_name", "ph": "M", "pid": 0, "tid": 0, "args": {"name": COMPUTE}},
        {"name": "thread_name", "ph": "M", "pid": 0, "tid": 1, "args": {"name": COMM}},
    ]
    index = timeline.trace._index
    for stream, order in ((COMPUTE, timeline.trace.compute_order), (COMM, timeline.trace.comm_order)):
        for eid in order:
            e = index[eid]
            events.append(
                {
                    "name": e.label,
                    "cat": e.kind,
                    "ph": "X",
                    "pid": 0,
                    "tid": tids[stream],
                    "ts": round(timeline.start[eid] * 1e6, 3),
                    "dur": round(e.duration * 1e6, 3),
                    "args": {"id": eid, "blocking": e.blocking, "magnitude": e.magnitude, "deps": sorted(e.deps)},
                }
            )
    return {"traceEvents": events, "displayTimeUnit": "ms"}


def write_chrome_trace(timeline: Timeline, path, name: str = "device0") -> None:
    with open(path, "w") as f:
        json.dump(to_chrome_trace(timeline, name), f, indent=1, sort_keys=True)
        f.write("\n")


def total_duration(trace: DeviceTrace, streams: Iterable[str] = (COMPUTE, COMM)) -> float:
    return sum(e.duration for e in trace.events if e.stream in set(streams))
