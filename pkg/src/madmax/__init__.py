"""Trace-based analytical performance model for distributed ML workloads."""
from __future__ import annotations

__version__ = "0.1.0"

from .analysis import (
    PlanResult,
    ReportSummary,
    SearchDomain,
    enumerate_plans,
    evaluate_plan,
    normalized_gpu_hours,
    pareto_frontier,
    scale_study,
    search_optimal,
    summarize,
    training_duration,
)
from .cost import all2all_time, allgather_time, allreduce_time, collective_time, compute_time, lookup_time, reducescatter_time
from .plan import (
    CollectiveKind,
    CollectiveReq,
    Infeasibility,
    InfeasiblePlanError,
    MemoryFootprint,
    ParallelPlan,
    PlanEntry,
    Strategy,
    per_device_memory,
    required_collectives,
    sharding_factor,
    validate_plan,
)
from .trace import DeviceTrace, Event, Timeline, build_execution_order, build_streams, exposed_comm, simulate
from .workload import (
    MLP,
    Aggregate,
    DeviceSpec,
    EmbeddingBag,
    LayerSpec,
    ModelArch,
    MoE,
    SpecError,
    SystemSpec,
    TaskSpec,
    TransformerBlock,
    embedding_lookup_bytes,
    layer_activation_bytes,
    layer_fwd_flops,
    layer_param_count,
    scale_hardware,
)
