"""Declarative model, task and hardware descriptions.

Every type here is a frozen dataclass with a ``to_dict``/``from_dict`` pair so
the three JSON input files round-trip exactly.  The per-layer arithmetic
(FLOPs, parameter count, lookup and activation bytes) lives next to the types
because it only depends on layer dimensions.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

SCHEMA_VERSION = "1"

PRECISIONS = (1, 2, 4)
DTYPE_BY_BYTES = {1: "fp8", 2: "fp16", 4: "fp32"}
TASK_KINDS = ("pretrain", "finetune", "inference")
WORK_UNITS = ("samples", "tokens")
HW_COMPONENTS = ("compute", "hbm_capacity", "hbm_bw", "intra_bw", "inter_bw")


class SpecError(ValueError):
    """Malformed or inconsistent input description.

    ``path`` names the offending field (``layers[3].kind.hidden_dim``) and
    ``source`` the file it came from, when known.
    """

    def __init__(self, message: str, path: str = "", source: str | None = None):
        self.path = path
        self.source = source
        self.detail = message
        super().__init__(self._format())

    def _format(self) -> str:
        where = self.path
        if self.source:
            where = f"{self.source}:{where}" if where else self.source
        return f"{where}: {self.detail}" if where else self.detail

    def with_source(self, source: str) -> "SpecError":
        return SpecError(self.detail, self.path, source)


def _req(d: Mapping[str, Any], key: str, path: str) -> Any:
    if not isinstance(d, Mapping):
        raise SpecError("expected an object", path)
    if key not in d:
        raise SpecError("missing required field", f"{path}.{key}".lstrip("."))
    return d[key]


def _num(value: Any, path: str, *, integer: bool = False) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecError(f"expected a number, got {value!r}", path)
    if integer and not float(value).is_integer():
        raise SpecError(f"expected an integer, got {value!r}", path)
    return int(value) if integer else value


# ---------------------------------------------------------------------------
# Layer kinds


@dataclass(frozen=True)
class MLP:
    """Stack of ``num_layers`` fully connected layers.

    The first layer maps ``in_dim`` to ``hidden_dim`` (or ``out_dim`` when no
    hidden width is given), the last one maps to ``out_dim``.
    """

    in_dim: int
    out_dim: int
    num_layers: int = 1
    hidden_dim: int | None = None

    def shapes(self) -> list[tuple[int, int]]:
        hidden = self.hidden_dim if self.hidden_dim is not None else self.out_dim
        if self.num_layers == 1:
            return [(self.in_dim, self.out_dim)]
        dims = [self.in_dim] + [hidden] * (self.num_layers - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class EmbeddingBag:
    num_tables: int
    rows_per_table: int
    embedding_dim: int
    lookups_per_table_per_sample: int


@dataclass(frozen=True)
class TransformerBlock:
    """``num_layers`` identical decoder/encoder blocks.

    ``ffn_dim == 0`` denotes an attention-only block whose feed-forward part is
    modelled by a separate (usually MoE) layer.
    """

    hidden_dim: int
    num_heads: int
    ffn_dim: int
    num_layers: int = 1
    num_kv_heads: int | None = None
    gated_ffn: bool = False

    def attention_params(self) -> int:
        d = self.hidden_dim
        kv = self.num_kv_heads if self.num_kv_heads is not None else self.num_heads
        kv_dim = d * kv // self.num_heads
        return 2 * d * d + 2 * d * kv_dim

    def ffn_params(self) -> int:
        mats = 3 if self.gated_ffn else 2
        return mats * self.hidden_dim * self.ffn_dim

    def params_per_block(self) -> int:
        return self.attention_params() + self.ffn_params()


@dataclass(frozen=True)
class Aggregate:
    """Lumped layer described only by its per-sample totals."""

    fwd_flops_per_sample: float = 0.0
    params: float = 0.0
    lookup_bytes_per_sample: float = 0.0
    activation_bytes_per_sample: float = 0.0
    # number of activation-sized tensor-parallel reductions per pass
    tp_syncs: int = 1


@dataclass(frozen=True)
class MoE:
    expert: Union[MLP, TransformerBlock, Aggregate]
    num_experts: int
    active_experts: int


LayerKind = Union[MLP, EmbeddingBag, TransformerBlock, MoE, Aggregate]

_KIND_NAMES = {
    MLP: "MLP",
    EmbeddingBag: "EmbeddingBag",
    TransformerBlock: "TransformerBlock",
    MoE: "MoE",
    Aggregate: "Aggregate",
}
_KINDS_BY_NAME = {v: k for k, v in _KIND_NAMES.items()}


def _kind_to_dict(kind: LayerKind) -> dict:
    out: dict[str, Any] = {"type": _KIND_NAMES[type(kind)]}
    for f in dataclasses.fields(kind):
        value = getattr(kind, f.name)
        if isinstance(value, (MLP, TransformerBlock, Aggregate, MoE, EmbeddingBag)):
            value = _kind_to_dict(value)
        out[f.name] = value
    return out


def _kind_from_dict(d: Mapping[str, Any], path: str) -> LayerKind:
    name = _req(d, "type", path)
    cls = _KINDS_BY_NAME.get(name)
    if cls is None:
        raise SpecError(f"unknown layer kind {name!r}", f"{path}.type")
    kwargs: dict[str, Any] = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in d:
        if key != "type" and key not in names:
            raise SpecError("unknown field", f"{path}.{key}")
    for fname, f in names.items():
        fpath = f"{path}.{fname}"
        if fname not in d:
            if f.default is dataclasses.MISSING:
                raise SpecError("missing required field", fpath)
            continue
        value = d[fname]
        if fname == "expert":
            value = _kind_from_dict(value, fpath)
        elif fname == "gated_ffn":
            if not isinstance(value, bool):
                raise SpecError("expected a boolean", fpath)
        elif value is not None:
            value = _num(value, fpath, integer=cls is not Aggregate or fname == "tp_syncs")
        kwargs[fname] = value
    kind = cls(**kwargs)
    _check_kind(kind, path)
    return kind


def _check_kind(kind: LayerKind, path: str) -> None:
    if isinstance(kind, Aggregate):
        for f in dataclasses.fields(kind):
            if getattr(kind, f.name) < 0:
                raise SpecError("must be >= 0", f"{path}.{f.name}")
        return
    if isinstance(kind, MoE):
        if kind.num_experts < 1 or kind.active_experts < 1:
            raise SpecError("expert counts must be >= 1", path)
        if kind.active_experts > kind.num_experts:
            raise SpecError("active_experts exceeds num_experts", f"{path}.active_experts")
        if isinstance(kind.expert, MoE):
            raise SpecError("nested MoE is not supported", f"{path}.expert")
        _check_kind(kind.expert, f"{path}.expert")
        return
    for f in dataclasses.fields(kind):
        value = getattr(kind, f.name)
        if value is None or isinstance(value, bool):
            continue
        if isinstance(kind, TransformerBlock) and f.name == "ffn_dim":
            if value < 0:
                raise SpecError("must be >= 0", f"{path}.{f.name}")
            continue
        if value < 1:
            raise SpecError("must be >= 1", f"{path}.{f.name}")
    if isinstance(kind, TransformerBlock) and kind.hidden_dim % kind.num_heads:
        raise SpecError("hidden_dim must be divisible by num_heads", path)


# ---------------------------------------------------------------------------
# Layers and models


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: LayerKind
    param_precision_bytes: int = 4
    activation_precision_bytes: int = 4
    # plan key; derived from the kind when absent
    group: str | None = None
    # producer layers; ``None`` means the previous layer in execution order
    inputs: tuple[str, ...] | None = None
    optimizer_bytes_per_param: float | None = None
    # MoE token routing on the critical path
    blocking_all2all: bool = True

    def __post_init__(self):
        if self.param_precision_bytes not in PRECISIONS:
            raise SpecError(f"precision must be one of {PRECISIONS}", f"{self.id}.param_precision_bytes")
        if self.activation_precision_bytes not in PRECISIONS:
            raise SpecError(
                f"precision must be one of {PRECISIONS}", f"{self.id}.activation_precision_bytes"
            )
        _check_kind(self.kind, f"{self.id}.kind")

    @property
    def plan_group(self) -> str:
        if self.group is not None:
            return self.group
        if is_embedding(self):
            return "embedding"
        if isinstance(self.kind, TransformerBlock):
            return "transformer"
        if isinstance(self.kind, MoE):
            return "moe"
        return "dense"

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"id": self.id, "kind": _kind_to_dict(self.kind)}
        out["param_precision_bytes"] = self.param_precision_bytes
        out["activation_precision_bytes"] = self.activation_precision_bytes
        if self.group is not None:
            out["group"] = self.group
        if self.inputs is not None:
            out["inputs"] = list(self.inputs)
        if self.optimizer_bytes_per_param is not None:
            out["optimizer_bytes_per_param"] = self.optimizer_bytes_per_param
        if not self.blocking_all2all:
            out["blocking_all2all"] = False
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], path: str = "layer") -> "LayerSpec":
        lid = _req(d, "id", path)
        if not isinstance(lid, str) or not lid:
            raise SpecError("layer id must be a non-empty string", f"{path}.id")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise SpecError("unknown field", f"{path}.{key}")
        kind = _kind_from_dict(_req(d, "kind", path), f"{path}.kind")
        inputs = d.get("inputs")
        if inputs is not None:
            if not isinstance(inputs, list) or not all(isinstance(i, str) for i in inputs):
                raise SpecError("expected a list of layer ids", f"{path}.inputs")
            inputs = tuple(inputs)
        opt = d.get("optimizer_bytes_per_param")
        if opt is not None:
            opt = _num(opt, f"{path}.optimizer_bytes_per_param")
        try:
            return cls(
                id=lid,
                kind=kind,
                param_precision_bytes=_num(d.get("param_precision_bytes", 4), f"{path}.param_precision_bytes", integer=True),
                activation_precision_bytes=_num(
                    d.get("activation_precision_bytes", 4), f"{path}.activation_precision_bytes", integer=True
                ),
                group=d.get("group"),
                inputs=inputs,
                optimizer_bytes_per_param=opt,
                blocking_all2all=bool(d.get("blocking_all2all", True)),
            )
        except SpecError as exc:
            raise SpecError(exc.detail, f"{path}.{exc.path.split('.', 1)[-1]}") from None


@dataclass(frozen=True)
class ModelArch:
    name: str
    layers: tuple[LayerSpec, ...]
    execution_order: tuple[str, ...]
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        # an empty model is representable; validate_plan reports it
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise SpecError("duplicate layer ids", "layers")
        if sorted(self.execution_order) != sorted(ids):
            raise SpecError("execution_order must be a permutation of layer ids", "execution_order")
        known = set(ids)
        for layer in self.layers:
            for src in layer.inputs or ():
                if src not in known:
                    raise SpecError(f"unknown input layer {src!r}", f"{layer.id}.inputs")
        pos = {lid: i for i, lid in enumerate(self.execution_order)}
        for layer in self.layers:
            for src in layer.inputs or ():
                if pos[src] >= pos[layer.id]:
                    raise SpecError(f"input {src!r} runs after its consumer", f"{layer.id}.inputs")

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def ordered_layers(self) -> list[LayerSpec]:
        by_id = {layer.id: layer for layer in self.layers}
        return [by_id[lid] for lid in self.execution_order]

    def inputs_of(self, layer_id: str) -> tuple[str, ...]:
        layer = self.layer(layer_id)
        if layer.inputs is not None:
            return layer.inputs
        i = self.execution_order.index(layer_id)
        return (self.execution_order[i - 1],) if i > 0 else ()

    def consumers_of(self, layer_id: str) -> tuple[str, ...]:
        return tuple(lid for lid in self.execution_order if layer_id in self.inputs_of(lid))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "name": self.name}
        if self.notes:
            out["notes"] = list(self.notes)
        out["layers"] = [layer.to_dict() for layer in self.layers]
        out["execution_order"] = list(self.execution_order)
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelArch":
        _check_version(d)
        layers_raw = _req(d, "layers", "")
        if not isinstance(layers_raw, list):
            raise SpecError("expected a list", "layers")
        layers = tuple(LayerSpec.from_dict(ld, f"layers[{i}]") for i, ld in enumerate(layers_raw))
        order = d.get("execution_order")
        if order is None:
            order = [layer.id for layer in layers]
        return cls(
            name=d.get("name", "model"),
            layers=layers,
            execution_order=tuple(order),
            notes=tuple(d.get("notes", ())),
        )


def _check_version(d: Mapping[str, Any]) -> None:
    if not isinstance(d, Mapping):
        raise SpecError("expected a JSON object at top level")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SpecError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION!r})", "schema_version")


# ---------------------------------------------------------------------------
# Task


@dataclass(frozen=True)
class ModelingOptions:
    """Calibration knobs that the first-order formulas leave open."""

    backward_flops_factor: float = 2.0
    # share of backward FLOPs spent on weight gradients
    wgrad_fraction: float = 0.5
    # sparse optimizer update relative to forward lookup bytes
    backward_lookup_factor: float = 1.0
    # per-device lookup imbalance (1.0 = even sharding)
    lookup_skew: float = 1.0
    dense_optimizer_bytes_per_param: float = 8.0
    embedding_optimizer_bytes_per_param: float = 4.0
    # embedding gradients are applied in a fused sparse update, never materialized
    sparse_embedding_grads: bool = True

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                continue
            if value < 0:
                raise SpecError("must be >= 0", f"options.{f.name}")
        if not 0.0 <= self.wgrad_fraction <= 1.0:
            raise SpecError("must be in [0, 1]", "options.wgrad_fraction")
        if self.lookup_skew < 1.0:
            raise SpecError("must be >= 1", "options.lookup_skew")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelingOptions":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise SpecError("unknown field", f"options.{key}")
        return cls(**dict(d))


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    global_batch: int
    context_length: int | None = None
    frozen_layers: frozenset[str] = frozenset()
    total_work: float | None = None
    unit: str = "samples"
    options: ModelingOptions = field(default_factory=ModelingOptions)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise SpecError(f"kind must be one of {TASK_KINDS}", "kind")
        if self.global_batch < 1:
            raise SpecError("global_batch must be >= 1", "global_batch")
        if self.context_length is not None and self.context_length < 1:
            raise SpecError("context_length must be >= 1", "context_length")
        if self.frozen_layers and self.kind != "finetune":
            raise SpecError("frozen_layers only apply to finetune tasks", "frozen_layers")
        if self.unit not in WORK_UNITS:
            raise SpecError(f"unit must be one of {WORK_UNITS}", "unit")
        if self.unit == "tokens" and self.context_length is None:
            raise SpecError("token-based tasks need a context_length", "unit")
        if self.total_work is not None and self.total_work <= 0:
            raise SpecError("total_work must be > 0", "total_work")

    @property
    def training(self) -> bool:
        return self.kind != "inference"

    @property
    def work_per_iteration(self) -> float:
        """Samples or tokens processed per iteration."""
        if self.unit == "tokens":
            return float(self.global_batch * self.context_length)
        return float(self.global_batch)

    def check_model(self, model: ModelArch) -> None:
        ids = {layer.id for layer in model.layers}
        unknown = sorted(self.frozen_layers - ids)
        if unknown:
            raise SpecError(f"unknown frozen layers {unknown}", "frozen_layers")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind, "global_batch": self.global_batch}
        if self.context_length is not None:
            out["context_length"] = self.context_length
        if self.frozen_layers:
            out["frozen_layers"] = sorted(self.frozen_layers)
        if self.total_work is not None:
            out["total_work"] = self.total_work
        out["unit"] = self.unit
        if self.options != ModelingOptions():
            out["options"] = self.options.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskSpec":
        ctx = d.get("context_length")
        total = d.get("total_work")
        return cls(
            kind=_req(d, "kind", ""),
            global_batch=_num(_req(d, "global_batch", ""), "global_batch", integer=True),
            context_length=None if ctx is None else _num(ctx, "context_length", integer=True),
            frozen_layers=frozenset(d.get("frozen_layers", ())),
            total_work=None if total is None else _num(total, "total_work"),
            unit=d.get("unit", "samples"),
            options=ModelingOptions.from_dict(d.get("options", {})),
        )


# ---------------------------------------------------------------------------
# Hardware


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    # FLOP/s keyed by datatype ("fp32", "fp16", "fp8")
    peak_flops: Mapping[str, float]
    hbm_capacity: float
    hbm_bandwidth: float
    compute_utilization: float = 0.7
    hbm_utilization: float = 0.8

    def __post_init__(self):
        if not self.peak_flops:
            raise SpecError("peak_flops needs at least one datatype", "device.peak_flops")
        for dtype, value in self.peak_flops.items():
            if dtype not in DTYPE_BY_BYTES.values():
                raise SpecError(f"unknown datatype {dtype!r}", f"device.peak_flops.{dtype}")
            if not value > 0:
                raise SpecError("must be > 0", f"device.peak_flops.{dtype}")
        for name in ("hbm_capacity", "hbm_bandwidth"):
            if not getattr(self, name) > 0:
                raise SpecError("must be > 0", f"device.{name}")
        for name in ("compute_utilization", "hbm_utilization"):
            if not 0 < getattr(self, name) <= 1:
                raise SpecError("must be in (0, 1]", f"device.{name}")

    def peak_for(self, precision_bytes: int) -> float:
        """Peak FLOP/s for the datatype of the given width.

        Falls back to the next wider datatype the device lists, then to the
        widest one available.
        """
        for width in sorted(w for w in DTYPE_BY_BYTES if w >= precision_bytes):
            dtype = DTYPE_BY_BYTES[width]
            if dtype in self.peak_flops:
                return self.peak_flops[dtype]
        widest = max(DTYPE_BY_BYTES[w] for w in DTYPE_BY_BYTES if DTYPE_BY_BYTES[w] in self.peak_flops)
        return self.peak_flops[widest]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "peak_flops": dict(self.peak_flops),
            "compute_utilization": self.compute_utilization,
            "hbm_capacity": self.hbm_capacity,
            "hbm_bandwidth": self.hbm_bandwidth,
            "hbm_utilization": self.hbm_utilization,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DeviceSpec":
        peaks = _req(d, "peak_flops", "device")
        if not isinstance(peaks, Mapping):
            raise SpecError("expected an object", "device.peak_flops")
        return cls(
            name=d.get("name", "device"),
            peak_flops={k: _num(v, f"device.peak_flops.{k}") for k, v in peaks.items()},
            compute_utilization=_num(d.get("compute_utilization", 0.7), "device.compute_utilization"),
            hbm_capacity=_num(_req(d, "hbm_capacity", "device"), "device.hbm_capacity"),
            hbm_bandwidth=_num(_req(d, "hbm_bandwidth", "device"), "device.hbm_bandwidth"),
            hbm_utilization=_num(d.get("hbm_utilization", 0.8), "device.hbm_utilization"),
        )


@dataclass(frozen=True)
class EfficiencyEntry:
    collective: str
    level: str
    min_bytes: float
    efficiency: float


COLLECTIVE_NAMES = ("All2All", "AllReduce", "AllGather", "ReduceScatter")
LEVELS = ("intra", "inter")


@dataclass(frozen=True)
class EfficiencyTable:
    """Measured collective efficiency keyed by collective, level and size.

    The entry with the largest ``min_bytes`` not exceeding the message size
    wins; unmatched lookups return 1.0.
    """

    entries: tuple[EfficiencyEntry, ...] = ()

    def __post_init__(self):
        for i, e in enumerate(self.entries):
            if e.collective not in COLLECTIVE_NAMES:
                raise SpecError(f"unknown collective {e.collective!r}", f"collective_efficiency[{i}].collective")
            if e.level not in LEVELS:
                raise SpecError(f"unknown level {e.level!r}", f"collective_efficiency[{i}].level")
            if not 0 < e.efficiency <= 1:
                raise SpecError("efficiency must be in (0, 1]", f"collective_efficiency[{i}].efficiency")
            if e.min_bytes < 0:
                raise SpecError("min_bytes must be >= 0", f"collective_efficiency[{i}].min_bytes")

    def lookup(self, collective: str, level: str, nbytes: float = float("inf")) -> float:
        best = None
        for e in self.entries:
            if e.collective == collective and e.level == level and e.min_bytes <= nbytes:
                if best is None or e.min_bytes >= best.min_bytes:
                    best = e
        return 1.0 if best is None else best.efficiency

    def to_rows(self) -> list[dict]:
        return [dataclasses.asdict(e) for e in self.entries]

    @classmethod
    def from_rows(cls, rows) -> "EfficiencyTable":
        entries = []
        for i, row in enumerate(rows):
            path = f"collective_efficiency[{i}]"
            entries.append(
                EfficiencyEntry(
                    collective=str(_req(row, "collective", path)).strip(),
                    level=str(_req(row, "level", path)).strip(),
                    min_bytes=float(_req(row, "min_bytes", path)),
                    efficiency=float(_req(row, "efficiency", path)),
                )
            )
        return cls(tuple(entries))

    @classmethod
    def from_csv(cls, text: str) -> "EfficiencyTable":
        import csv
        import io

        reader = csv.DictReader(io.StringIO(text))
        missing = {"collective", "level", "min_bytes", "efficiency"} - set(reader.fieldnames or ())
        if missing:
            raise SpecError(f"efficiency CSV lacks columns {sorted(missing)}")
        return cls.from_rows(list(reader))

    def to_csv(self) -> str:
        lines = ["collective,level,min_bytes,efficiency"]
        for e in self.entries:
            lines.append(f"{e.collective},{e.level},{e.min_bytes!r},{e.efficiency!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SystemSpec:
    name: str
    device: DeviceSpec
    devices_per_node: int
    num_nodes: int
    # unidirectional bytes/s per device
    intra_node_bw: float
    inter_node_bw: float
    collective_efficiency: EfficiencyTable = field(default_factory=EfficiencyTable)
    # fixed launch cost per collective, seconds
    launch_latency: Mapping[str, float] = field(default_factory=dict)
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.devices_per_node < 1 or self.num_nodes < 1:
            raise SpecError("device counts must be >= 1", "devices_per_node")
        if not self.intra_node_bw > 0:
            raise SpecError("must be > 0", "intra_node_bw")
        if not self.inter_node_bw > 0:
            raise SpecError("must be > 0", "inter_node_bw")
        for k, v in self.launch_latency.items():
            if k not in COLLECTIVE_NAMES:
                raise SpecError(f"unknown collective {k!r}", f"launch_latency.{k}")
            if v < 0:
                raise SpecError("must be >= 0", f"launch_latency.{k}")

    @property
    def total_devices(self) -> int:
        return self.devices_per_node * self.num_nodes

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "name": self.name}
        if self.notes:
            out["notes"] = list(self.notes)
        out["device"] = self.device.to_dict()
        out["devices_per_node"] = self.devices_per_node
        out["num_nodes"] = self.num_nodes
        out["intra_node_bw"] = self.intra_node_bw
        out["inter_node_bw"] = self.inter_node_bw
        if self.collective_efficiency.entries:
            out["collective_efficiency"] = self.collective_efficiency.to_rows()
        if self.launch_latency:
            out["launch_latency"] = dict(self.launch_latency)
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], efficiency: EfficiencyTable | None = None) -> "SystemSpec":
        _check_version(d)
        try:
            device = DeviceSpec.from_dict(_req(d, "device", ""))
        except SpecError as exc:
            raise SpecError(exc.detail, exc.path if exc.path.startswith("device") else f"device.{exc.path}") from None
        if efficiency is None:
            efficiency = EfficiencyTable.from_rows(d.get("collective_efficiency", []))
        return cls(
            name=d.get("name", "system"),
            device=device,
            devices_per_node=_num(_req(d, "devices_per_node", ""), "devices_per_node", integer=True),
            num_nodes=_num(_req(d, "num_nodes", ""), "num_nodes", integer=True),
            intra_node_bw=_num(_req(d, "intra_node_bw", ""), "intra_node_bw"),
            inter_node_bw=_num(_req(d, "inter_node_bw", ""), "inter_node_bw"),
            collective_efficiency=efficiency,
            launch_latency=dict(d.get("launch_latency", {})),
            notes=tuple(d.get("notes", ())),
        )


def scale_hardware(system: SystemSpec, factors: Mapping[str, float]) -> SystemSpec:
    """Copy of ``system`` with the named components multiplied.

    Components: compute, hbm_capacity, hbm_bw, intra_bw, inter_bw.
    """
    for comp, f in factors.items():
        if comp not in HW_COMPONENTS:
            raise SpecError(f"unknown hardware component {comp!r}", comp)
        if not f > 0:
            raise SpecError(f"scale factor must be > 0, got {f!r}", comp)
    dev = system.device
    device = dataclasses.replace(
        dev,
        peak_flops={k: v * factors.get("compute", 1.0) for k, v in dev.peak_flops.items()},
        hbm_capacity=dev.hbm_capacity * factors.get("hbm_capacity", 1.0),
        hbm_bandwidth=dev.hbm_bandwidth * factors.get("hbm_bw", 1.0),
    )
    return dataclasses.replace(
        system,
        device=device,
        intra_node_bw=system.intra_node_bw * factors.get("intra_bw", 1.0),
        inter_node_bw=system.inter_node_bw * factors.get("inter_bw", 1.0),
    )


# ---------------------------------------------------------------------------
# Per-layer quantities


def is_embedding(layer: LayerSpec) -> bool:
    kind = layer.kind
    return isinstance(kind, EmbeddingBag) or (isinstance(kind, Aggregate) and kind.lookup_bytes_per_sample > 0)


def _needs_context(kind: LayerKind) -> bool:
    if isinstance(kind, MoE):
        return _needs_context(kind.expert)
    return isinstance(kind, TransformerBlock)


def _check_batch(local_batch: float, layer: LayerSpec, context_length: int | None) -> None:
    if not local_batch >= 1:
        raise SpecError(f"local batch must be >= 1, got {local_batch!r}", layer.id)
    if _needs_context(layer.kind) and context_length is None:
        raise SpecError("transformer layers need a context_length", layer.id)


def _kind_flops(kind: LayerKind, batch: float, context_length: int | None) -> float:
    if isinstance(kind, MLP):
        return sum(2.0 * i * o * batch for i, o in kind.shapes())
    if isinstance(kind, EmbeddingBag):
        return 0.0
    if isinstance(kind, TransformerBlock):
        d, seq = kind.hidden_dim, context_length
        tokens = batch * seq
        dense = 2.0 * kind.params_per_block() * tokens
        scores = 4.0 * batch * seq * seq * d
        return kind.num_layers * (dense + scores)
    if isinstance(kind, MoE):
        return kind.active_experts * _kind_flops(kind.expert, batch, context_length)
    return kind.fwd_flops_per_sample * batch


def layer_fwd_flops(layer: LayerSpec, local_batch: float, context_length: int | None = None) -> float:
    """Forward FLOPs of ``layer`` for ``local_batch`` samples (sequences)."""
    _check_batch(local_batch, layer, context_length)
    return _kind_flops(layer.kind, local_batch, context_length)


def _kind_params(kind: LayerKind) -> float:
    if isinstance(kind, MLP):
        return sum(i * o + o for i, o in kind.shapes())
    if isinstance(kind, EmbeddingBag):
        return kind.num_tables * kind.rows_per_table * kind.embedding_dim
    if isinstance(kind, TransformerBlock):
        return kind.num_layers * kind.params_per_block()
    if isinstance(kind, MoE):
        return kind.num_experts * _kind_params(kind.expert)
    return kind.params


def layer_param_count(layer: LayerSpec) -> float:
    return _kind_params(layer.kind)


def embedding_lookup_bytes(layer: LayerSpec, local_batch: float) -> float:
    """Bytes read from HBM by the pooled lookups of ``local_batch`` samples."""
    kind = layer.kind
    if isinstance(kind, EmbeddingBag):
        per_sample = (
            kind.num_tables * kind.lookups_per_table_per_sample * kind.embedding_dim * layer.param_precision_bytes
        )
        return per_sample * local_batch
    if isinstance(kind, Aggregate) and kind.lookup_bytes_per_sample > 0:
        return kind.lookup_bytes_per_sample * local_batch
    raise SpecError("layer performs no embedding lookups", layer.id)


def _kind_activation(kind: LayerKind, batch: float, context_length: int | None, prec: int) -> float:
    if isinstance(kind, MLP):
        return kind.out_dim * batch * prec
    if isinstance(kind, EmbeddingBag):
        return kind.num_tables * kind.embedding_dim * batch * prec
    if isinstance(kind, TransformerBlock):
        return kind.hidden_dim * context_length * batch * prec
    if isinstance(kind, MoE):
        return _kind_activation(kind.expert, batch, context_length, prec)
    return kind.activation_bytes_per_sample * batch


def layer_activation_bytes(layer: LayerSpec, local_batch: float, context_length: int | None = None) -> float:
    """Bytes of the layer's output tensor."""
    _check_batch(local_batch, layer, context_length)
    return _kind_activation(layer.kind, local_batch, context_length, layer.activation_precision_bytes)


def _depth(kind: LayerKind) -> int:
    if isinstance(kind, (MLP, TransformerBlock)):
        return kind.num_layers
    if isinstance(kind, MoE):
        return _depth(kind.expert)
    return 1


def retained_activation_bytes(layer: LayerSpec, local_batch: float, context_length: int | None = None) -> float:
    """Activations kept for the backward pass (one output tensor per sub-layer)."""
    kind = layer.kind
    if isinstance(kind, MoE):
        # every token's activation is held by each of its active experts
        return kind.active_experts * _depth(kind) * layer_activation_bytes(layer, local_batch, context_length)
    return _depth(kind) * layer_activation_bytes(layer, local_batch, context_length)


def tp_sync_bytes(layer: LayerSpec, batch: float, context_length: int | None = None) -> float:
    """Activation bytes all-reduced per pass when the layer is tensor-parallel.

    One reduction per fully connected sub-layer, two per transformer block
    (attention and feed-forward), ``tp_syncs`` for lumped layers.
    """
    kind = layer.kind
    expert = kind.expert if isinstance(kind, MoE) else kind
    prec = layer.activation_precision_bytes
    if isinstance(expert, MLP):
        return sum(o * batch * prec for _, o in expert.shapes())
    if isinstance(expert, TransformerBlock):
        per_block = 2 if expert.ffn_dim else 1
        return per_block * expert.num_layers * _kind_activation(expert, batch, context_length, prec)
    if isinstance(expert, Aggregate):
        return expert.tp_syncs * _kind_activation(expert, batch, context_length, prec)
    return _kind_activation(expert, batch, context_length, prec)
