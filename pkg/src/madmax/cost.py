"""First-order time estimates for compute, lookups and collectives.

Collectives use a bandwidth-only ring model.  Collectives spanning both
hierarchy levels are composed serially: the intra-node ring moves the whole
buffer, the inter-node ring moves the ``1/devices_per_node`` slice that each
device owns after the intra-node phase.
"""
from __future__ import annotations

from dataclasses import dataclass

from .plan import CollectiveKind, CollectiveReq
from .workload import DeviceSpec, SystemSpec


@dataclass(frozen=True)
class CostedEvent:
    source_layer: str
    kind: str  # "compute", "lookup" or a collective name
    duration: float
    magnitude: float
    phase: str

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("negative duration")


def compute_time(flops: float, device: DeviceSpec, precision_bytes: int = 4) -> float:
    if flops < 0:
        raise ValueError("flops must be >= 0")
    return flops / (device.peak_for(precision_bytes) * device.compute_utilization)


def lookup_time(nbytes: float, device: DeviceSpec) -> float:
    if nbytes < 0:
        raise ValueError("bytes must be >= 0")
    return nbytes / (device.hbm_bandwidth * device.hbm_utilization)


def _level_bw(system: SystemSpec, level: str) -> float:
    return system.intra_node_bw if level == "intra" else system.inter_node_bw


def _level_size(system: SystemSpec, level: str) -> int:
    return system.devices_per_node if level == "intra" else system.num_nodes


def _phases(system: SystemSpec, span: str) -> list[str]:
    """Physical levels a collective over ``span`` traverses, dropping trivial ones."""
    if span == "global":
        levels = ["intra", "inter"]
    elif span in ("intra", "inter"):
        levels = [span]
    else:
        raise ValueError(f"unknown span {span!r}")
    return [lvl for lvl in levels if _level_size(system, lvl) > 1]


def _latency(system: SystemSpec, kind: str, nbytes: float) -> float:
    return system.launch_latency.get(kind, 0.0) if nbytes > 0 else 0.0


def _ring(kind: str, steps_factor: float, nbytes: float, system: SystemSpec, level: str) -> float:
    n = _level_size(system, level)
    if n <= 1 or nbytes == 0:
        return 0.0
    eff = system.collective_efficiency.lookup(kind, level, nbytes)
    return steps_factor * (n - 1) / n * nbytes / (_level_bw(system, level) * eff)


def all2all_time(send_bytes: float, system: SystemSpec, span: str = "global") -> float:
    """Send volume over the slowest interconnect the exchange crosses."""
    if send_bytes < 0:
        raise ValueError("bytes must be >= 0")
    levels = _phases(system, span)
    if not levels or send_bytes == 0:
        return 0.0
    # point-to-point exchange: bound by the slowest level it crosses
    effective = min(
        _level_bw(system, lvl) * system.collective_efficiency.lookup("All2All", lvl, send_bytes) for lvl in levels
    )
    return send_bytes / effective + _latency(system, "All2All", send_bytes)


def allreduce_time(buffer_bytes: float, system: SystemSpec, span: str = "global") -> float:
    if buffer_bytes < 0:
        raise ValueError("bytes must be >= 0")
    total = 0.0
    nbytes = buffer_bytes
    for level in _phases(system, span):
        total += _ring("AllReduce", 2.0, nbytes, system, level)
        # later levels only carry the slice reduce-scattered at this one
        nbytes = nbytes / _level_size(system, level)
    return total + _latency(system, "AllReduce", buffer_bytes)


def _gather_like(kind: str, shard_bytes: float, system: SystemSpec, span: str) -> float:
    if shard_bytes < 0:
        raise ValueError("bytes must be >= 0")
    levels = _phases(system, span)
    group = 1
    for level in levels:
        group *= _level_size(system, level)
    full = shard_bytes * group
    total = 0.0
    nbytes = full
    for level in levels:
        total += _ring(kind, 1.0, nbytes, system, level)
        nbytes = nbytes / _level_size(system, level)
    return total + _latency(system, kind, shard_bytes)


def allgather_time(shard_bytes: float, system: SystemSpec, span: str = "global") -> float:
    """Ring AllGather where every participant contributes ``shard_bytes``."""
    return _gather_like("AllGather", shard_bytes, system, span)


def reducescatter_time(shard_bytes: float, system: SystemSpec, span: str = "global") -> float:
    return _gather_like("ReduceScatter", shard_bytes, system, span)


def collective_time(req: CollectiveReq, system: SystemSpec) -> float:
    if req.kind is CollectiveKind.ALL2ALL:
        return all2all_time(req.bytes_per_device, system, req.level)
    if req.kind is CollectiveKind.ALLREDUCE:
        return allreduce_time(req.bytes_per_device, system, req.level)
    if req.kind is CollectiveKind.ALLGATHER:
        return allgather_time(req.bytes_per_device, system, req.level)
    return reducescatter_time(req.bytes_per_device, system, req.level)
