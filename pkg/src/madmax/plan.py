"""Hierarchical parallelization plans, their collectives and memory footprint."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping

from .workload import (
    MoE,
    ModelArch,
    LayerSpec,
    SpecError,
    SystemSpec,
    TaskSpec,
    is_embedding,
    layer_activation_bytes,
    layer_param_count,
    retained_activation_bytes,
    tp_sync_bytes,
)


class Strategy(enum.Enum):
    DDP = "DDP"
    FSDP = "FSDP"
    TP = "TP"
    MP_SHARD = "MP"
    NONE = "NONE"

    @classmethod
    def parse(cls, name: str, path: str = "") -> "Strategy":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise SpecError(f"unknown strategy {name!r} (one of {valid})", path) from None

    @property
    def shards(self) -> bool:
        return self in (Strategy.FSDP, Strategy.TP, Strategy.MP_SHARD)


class PlanError(ValueError):
    """A strategy was requested for a layer that cannot use it."""


@dataclass(frozen=True, order=True)
class PlanEntry:
    intra: Strategy
    inter: Strategy

    def __str__(self) -> str:
        if self.intra is self.inter is Strategy.MP_SHARD:
            return "(MP)"
        return f"({self.intra.value}, {self.inter.value})"

    def to_dict(self) -> dict:
        if self.intra is self.inter is Strategy.MP_SHARD:
            return {"shard": "MP"}
        return {"intra": self.intra.value, "inter": self.inter.value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], path: str = "") -> "PlanEntry":
        if not isinstance(d, Mapping):
            raise SpecError("expected an object", path)
        if "shard" in d:
            s = Strategy.parse(d["shard"], f"{path}.shard")
            return cls(s, s)
        if "intra" not in d or "inter" not in d:
            raise SpecError("needs both 'intra' and 'inter' (or 'shard')", path)
        return cls(Strategy.parse(d["intra"], f"{path}.intra"), Strategy.parse(d["inter"], f"{path}.inter"))


@dataclass(frozen=True)
class ParallelPlan:
    """Strategy pair per layer group, with optional per-layer overrides."""

    entries: Mapping[str, PlanEntry]
    overrides: Mapping[str, PlanEntry] = field(default_factory=dict)
    fsdp_prefetch: bool = False

    def entry_for(self, layer: LayerSpec) -> PlanEntry:
        if layer.id in self.overrides:
            return self.overrides[layer.id]
        try:
            return self.entries[layer.plan_group]
        except KeyError:
            raise SpecError(f"plan does not cover layer group {layer.plan_group!r}", layer.id) from None

    @property
    def name(self) -> str:
        parts = [f"{g}={self.entries[g]}" for g in sorted(self.entries)]
        parts += [f"{lid}={self.overrides[lid]}" for lid in sorted(self.overrides)]
        if self.fsdp_prefetch:
            parts.append("prefetch")
        return " ".join(parts)

    def __str__(self) -> str:
        return self.name

    def to_dict(self) -> dict:
        out: dict[str, Any] = {g: self.entries[g].to_dict() for g in sorted(self.entries)}
        if self.overrides:
            out["overrides"] = {k: self.overrides[k].to_dict() for k in sorted(self.overrides)}
        if self.fsdp_prefetch:
            out["fsdp_prefetch"] = True
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], path: str = "plan") -> "ParallelPlan":
        if not isinstance(d, Mapping):
            raise SpecError("expected an object", path)
        entries = {}
        overrides = {}
        for key, value in d.items():
            if key == "fsdp_prefetch":
                continue
            if key == "overrides":
                overrides = {lid: PlanEntry.from_dict(v, f"{path}.overrides.{lid}") for lid, v in value.items()}
                continue
            entries[key] = PlanEntry.from_dict(value, f"{path}.{key}")
        return cls(entries=entries, overrides=overrides, fsdp_prefetch=bool(d.get("fsdp_prefetch", False)))


class CollectiveKind(enum.Enum):
    ALL2ALL = "All2All"
    ALLREDUCE = "AllReduce"
    ALLGATHER = "AllGather"
    REDUCESCATTER = "ReduceScatter"


@dataclass(frozen=True)
class CollectiveReq:
    """One collective a layer issues per iteration.

    ``bytes_per_device`` is the shard size for AllGather/ReduceScatter, the
    buffer size for AllReduce and the send volume for All2All.  ``role`` fixes
    where the event sits relative to the layer's compute: ``param_gather`` and
    ``routing`` run before it, ``activation`` after it, ``grad_reduce`` after
    the weight gradient, and ``pooled`` after the forward lookup but before
    the backward update.
    """

    kind: CollectiveKind
    bytes_per_device: float
    phase: str
    blocking: bool
    level: str
    source_layer: str
    role: str
    participants: int


@dataclass(frozen=True)
class MemoryFootprint:
    params: float
    grads: float
    optimizer_states: float
    activations: float
    capacity: float

    @property
    def total(self) -> float:
        return self.params + self.grads + self.optimizer_states + self.activations

    @property
    def fits(self) -> bool:
        return self.total <= self.capacity

    @property
    def overage(self) -> float:
        return max(0.0, self.total - self.capacity)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "grads": self.grads,
            "optimizer_states": self.optimizer_states,
            "activations": self.activations,
            "total": self.total,
            "capacity": self.capacity,
            "fits": self.fits,
        }


@dataclass(frozen=True)
class Infeasibility:
    kind: str  # "oom" or "structural"
    message: str
    overage_bytes: float = 0.0
    memory: MemoryFootprint | None = None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind, "message": self.message}
        if self.kind == "oom":
            out["overage_bytes"] = self.overage_bytes
        if self.memory is not None:
            out["memory"] = self.memory.to_dict()
        return out


class InfeasiblePlanError(RuntimeError):
    def __init__(self, report: Infeasibility):
        self.report = report
        super().__init__(report.message)


# ---------------------------------------------------------------------------


def _levels(entry: PlanEntry, system: SystemSpec) -> list[tuple[str, Strategy, int]]:
    return [
        ("intra", entry.intra, system.devices_per_node),
        ("inter", entry.inter, system.num_nodes),
    ]


def sharding_factor(entry: PlanEntry, system: SystemSpec) -> int:
    """Number of pieces a layer's parameters are split into per device."""
    factor = 1
    for _, strategy, n in _levels(entry, system):
        if strategy.shards:
            factor *= n
    return factor


def _factor(entry: PlanEntry, system: SystemSpec, *strategies: Strategy) -> int:
    factor = 1
    for _, strategy, n in _levels(entry, system):
        if strategy in strategies:
            factor *= n
    return factor


def _span(entry: PlanEntry, system: SystemSpec, strategy: Strategy) -> tuple[str, int] | None:
    """Hierarchy level a strategy's collectives travel over, and its group size."""
    active = [(lvl, n) for lvl, s, n in _levels(entry, system) if s is strategy and n > 1]
    if not active:
        return None
    if len(active) == 2:
        return "global", active[0][1] * active[1][1]
    return active[0]


def local_batch(task: TaskSpec, system: SystemSpec) -> float:
    return task.global_batch / system.total_devices


def is_trainable(layer: LayerSpec, task: TaskSpec) -> bool:
    return task.training and layer.id not in task.frozen_layers


def check_entry(layer: LayerSpec, entry: PlanEntry) -> None:
    if Strategy.MP_SHARD in (entry.intra, entry.inter) and not is_embedding(layer):
        raise PlanError(f"MP sharding requested for non-embedding layer {layer.id!r}")


def required_collectives(
    layer: LayerSpec,
    entry: PlanEntry,
    task: TaskSpec,
    system: SystemSpec,
    batch: float | None = None,
    *,
    prefetch: bool = False,
) -> list[CollectiveReq]:
    """Collectives ``layer`` issues in one iteration under ``entry``."""
    check_entry(layer, entry)
    if batch is None:
        batch = local_batch(task, system)
    ctx = task.context_length
    trainable = is_trainable(layer, task)
    backward = task.training
    embedding = is_embedding(layer)
    param_bytes = layer_param_count(layer) * layer.param_precision_bytes
    shard_factor = sharding_factor(entry, system)
    reqs: list[CollectiveReq] = []

    def add(kind, nbytes, phase, blocking, span, role):
        level, n = span
        reqs.append(CollectiveReq(kind, float(nbytes), phase, blocking, level, layer.id, role, n))

    fsdp = _span(entry, system, Strategy.FSDP)
    if fsdp is not None:
        shard = param_bytes / shard_factor
        add(CollectiveKind.ALLGATHER, shard, "forward", not prefetch, fsdp, "param_gather")
        if backward:
            add(CollectiveKind.ALLGATHER, shard, "backward", not prefetch, fsdp, "param_gather")
        if trainable:
            add(CollectiveKind.REDUCESCATTER, shard, "backward", False, fsdp, "grad_reduce")

    tp = _span(entry, system, Strategy.TP)
    if tp is not None:
        group_batch = batch * _factor(entry, system, Strategy.TP)
        nbytes = tp_sync_bytes(layer, group_batch, ctx)
        add(CollectiveKind.ALLREDUCE, nbytes, "forward", True, tp, "activation")
        if backward and not embedding:
            add(CollectiveKind.ALLREDUCE, nbytes, "backward", True, tp, "activation")

    ddp = _span(entry, system, Strategy.DDP)
    if ddp is not None and trainable:
        add(CollectiveKind.ALLREDUCE, param_bytes / shard_factor, "backward", False, ddp, "grad_reduce")

    mp = _span(entry, system, Strategy.MP_SHARD)
    if mp is not None:
        n = mp[1]
        pooled = layer_activation_bytes(layer, batch, ctx) * (n - 1) / n
        add(CollectiveKind.ALL2ALL, pooled, "forward", True, mp, "pooled")
        if trainable:
            add(CollectiveKind.ALL2ALL, pooled, "backward", True, mp, "pooled")

    if isinstance(layer.kind, MoE) and system.total_devices > 1:
        moe = layer.kind
        routed = layer_activation_bytes(layer, batch, ctx) * moe.active_experts / moe.num_experts
        span = ("global", system.total_devices)
        if system.num_nodes == 1:
            span = ("intra", system.devices_per_node)
        elif system.devices_per_node == 1:
            span = ("inter", system.num_nodes)
        add(CollectiveKind.ALL2ALL, routed, "forward", layer.blocking_all2all, span, "routing")
        if backward:
            add(CollectiveKind.ALL2ALL, routed, "backward", layer.blocking_all2all, span, "routing")

    return reqs


def per_device_memory(model: ModelArch, plan: ParallelPlan, task: TaskSpec, system: SystemSpec) -> MemoryFootprint:
    batch = local_batch(task, system)
    ctx = task.context_length
    opts = task.options
    params = grads = opt = 0.0
    acts = []
    for layer in model.ordered_layers():
        entry = plan.entry_for(layer)
        count = layer_param_count(layer) / sharding_factor(entry, system)
        params += count * layer.param_precision_bytes
        if is_trainable(layer, task):
            embedding = is_embedding(layer)
            if not (embedding and opts.sparse_embedding_grads):
                grads += count * layer.param_precision_bytes
            per_param = layer.optimizer_bytes_per_param
            if per_param is None:
                per_param = (
                    opts.embedding_optimizer_bytes_per_param if embedding else opts.dense_optimizer_bytes_per_param
                )
            opt += count * per_param
        if task.training:
            acts.append(retained_activation_bytes(layer, batch, ctx))
        else:
            acts.append(layer_activation_bytes(layer, batch, ctx))
    if task.training:
        activations = sum(acts)
    elif len(acts) == 1:
        activations = acts[0]
    else:
        activations = max(a + b for a, b in zip(acts, acts[1:]))
    return MemoryFootprint(params, grads, opt, activations, system.device.hbm_capacity)


def structural_violations(model: ModelArch, plan: ParallelPlan, task: TaskSpec, system: SystemSpec) -> list[str]:
    problems = []
    if not model.layers:
        return ["model has no layers"]
    if local_batch(task, system) < 1:
        problems.append(
            f"global batch {task.global_batch} is smaller than the device count {system.total_devices}"
        )
    for layer in model.ordered_layers():
        try:
            entry = plan.entry_for(layer)
        except SpecError as exc:
            problems.append(str(exc))
            continue
        try:
            check_entry(layer, entry)
        except PlanError as exc:
            problems.append(str(exc))
        if (
            entry.intra is entry.inter is Strategy.NONE
            and system.total_devices > 1
            and is_trainable(layer, task)
        ):
            problems.append(f"trainable layer {layer.id!r} is replicated without gradient synchronization")
    return problems


def validate_plan(
    model: ModelArch, plan: ParallelPlan, task: TaskSpec, system: SystemSpec
) -> Infeasibility | None:
    """``None`` when the plan is runnable, otherwise the reason it is not."""
    if not model.layers:
        return Infeasibility("structural", "model has no layers")
    problems = structural_violations(model, plan, task, system)
    if problems:
        return Infeasibility("structural", "; ".join(problems))
    mem = per_device_memory(model, plan, task, system)
    if not mem.fits:
        return Infeasibility(
            "oom",
            f"per-device memory {mem.total / 1e9:.2f} GB exceeds capacity "
            f"{mem.capacity / 1e9:.2f} GB by {mem.overage / 1e9:.2f} GB",
            overage_bytes=mem.overage,
            memory=mem,
        )
    return None
