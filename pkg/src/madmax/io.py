"""Loading the model/system/task JSON trio and writing reports."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .analysis import PlanResult, ReportSummary, ScaleRow, SearchDomain, TrainingDuration
from .plan import ParallelPlan
from .trace import COMM, DeviceTrace
from .workload import (
    HW_COMPONENTS,
    SCHEMA_VERSION,
    EfficiencyTable,
    ModelArch,
    SpecError,
    SystemSpec,
    TaskSpec,
)

FIXTURE_ENV = "MADMAX_FIXTURES"
KINDS = ("models", "systems", "tasks")


class InputError(Exception):
    """Unreadable or malformed input file; maps to exit code 2."""


def fixtures_dir() -> Path:
    override = os.environ.get(FIXTURE_ENV)
    if override:
        return Path(override)
    return Path(__file__).resolve().parent / "fixtures"


def resolve(arg: str | os.PathLike, kind: str) -> Path:
    """A path as given, or a bare fixture name looked up under ``kind``."""
    path = Path(arg)
    if path.exists() or path.suffix or len(path.parts) > 1:
        return path
    return fixtures_dir() / kind / f"{arg}.json"


def fixture_names(kind: str) -> list[str]:
    folder = fixtures_dir() / kind
    return sorted(p.stem for p in folder.glob("*.json")) if folder.is_dir() else []


def _read_json(path: Path) -> Any:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def load_model(arg) -> ModelArch:
    path = resolve(arg, "models")
    try:
        return ModelArch.from_dict(_read_json(path))
    except SpecError as exc:
        raise InputError(str(exc.with_source(str(path)))) from None


def load_system(arg) -> SystemSpec:
    path = resolve(arg, "systems")
    d = _read_json(path)
    try:
        table = None
        if isinstance(d, Mapping) and "collective_efficiency_csv" in d:
            csv_path = path.parent / d["collective_efficiency_csv"]
            try:
                text = csv_path.read_text()
            except OSError:
                raise SpecError(f"cannot read {csv_path}", "collective_efficiency_csv") from None
            table = EfficiencyTable.from_csv(text)
        return SystemSpec.from_dict(d, efficiency=table)
    except SpecError as exc:
        raise InputError(str(exc.with_source(str(path)))) from None


@dataclass(frozen=True)
class TaskFile:
    task: TaskSpec
    plan: ParallelPlan | None = None
    search: SearchDomain | None = None
    baseline: ParallelPlan | None = None
    # iterations for the device-hour projection
    steps: float | None = None
    scale_factors: tuple[float, ...] = (10.0,)
    scale_components: tuple[str, ...] = HW_COMPONENTS


TASK_KEYS = {
    "schema_version",
    "name",
    "notes",
    "kind",
    "global_batch",
    "context_length",
    "frozen_layers",
    "total_work",
    "unit",
    "options",
    "plan",
    "search",
    "baseline",
    "steps",
    "scale",
}


def parse_task(d: Any) -> TaskFile:
    if not isinstance(d, Mapping):
        raise SpecError("expected a JSON object at top level")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SpecError(
            f"unsupported schema_version {d.get('schema_version')!r} (expected {SCHEMA_VERSION!r})", "schema_version"
        )
    for key in d:
        if key not in TASK_KEYS:
            raise SpecError("unknown field", key)
    task = TaskSpec.from_dict(d)
    plan = ParallelPlan.from_dict(d["plan"], "plan") if "plan" in d else None
    search = SearchDomain.from_dict(d["search"], "search") if "search" in d else None
    baseline = ParallelPlan.from_dict(d["baseline"], "baseline") if "baseline" in d else None
    scale = d.get("scale", {})
    factors = tuple(float(f) for f in scale.get("factors", (10.0,)))
    components = tuple(scale.get("components", HW_COMPONENTS))
    for c in components:
        if c not in HW_COMPONENTS:
            raise SpecError(f"unknown hardware component {c!r}", "scale.components")
    steps = d.get("steps")
    return TaskFile(task, plan, search, baseline, None if steps is None else float(steps), factors, components)


def load_task(arg) -> TaskFile:
    path = resolve(arg, "tasks")
    try:
        return parse_task(_read_json(path))
    except SpecError as exc:
        raise InputError(str(exc.with_source(str(path)))) from None


# ---------------------------------------------------------------------------
# Output


def fmt(x: float) -> str:
    """Fixed 6-significant-digit rendering used in every output file."""
    return f"{x:.6g}"


def _round(obj: Any) -> Any:
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, float):
        return float(fmt(obj)) if obj == obj and abs(obj) != float("inf") else str(obj)
    if isinstance(obj, Mapping):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_round(obj), indent=2, sort_keys=True) + "\n"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def report_dict(
    summary: ReportSummary | None,
    plan: ParallelPlan,
    *,
    model: str,
    system: str,
    infeasibility=None,
    durations: Mapping[str, TrainingDuration] | None = None,
) -> dict:
    out: dict[str, Any] = {"model": model, "system": system, "plan": plan.name, "feasible": infeasibility is None}
    if infeasibility is not None:
        out["infeasibility"] = infeasibility.to_dict()
    if summary is not None:
        out["summary"] = summary.to_dict()
        if summary.unit == "samples":
            out["summary"]["throughput_mqps"] = summary.mqps
    for label, d in (durations or {}).items():
        out[f"duration_{label}"] = {"steps": d.steps, "days": d.days, "device_hours": d.device_hours}
    return out


def breakdown_csv(summary: ReportSummary, trace: DeviceTrace) -> str:
    streams = {e.kind: e.stream for e in trace.events}
    rows = []
    for kind in sorted(summary.serialized_breakdown):
        rows.append(
            [
                kind,
                streams[kind],
                summary.serialized_breakdown[kind] * 1e3,
                summary.exposed_breakdown.get(kind, 0.0) * 1e3 if streams[kind] == COMM else 0.0,
            ]
        )
    rows.append(["total", "all", summary.serialized_iter_time * 1e3, summary.exposed_comm_time * 1e3])
    return csv_text(["category", "stream", "serialized_ms", "exposed_ms"], rows)


def sweep_header(unit: str) -> list[str]:
    return [
        "rank",
        "plan",
        "feasible",
        "memory_GB",
        "iter_ms",
        "serialized_ms",
        f"throughput_{unit}_per_s",
        "exposed_pct",
        "relative_throughput",
    ]


def sweep_rows(results: Sequence[PlanResult], baseline_throughput: float | None) -> list[list[Any]]:
    rows = []
    for i, r in enumerate(results, 1):
        s = r.summary
        rel = s.throughput / baseline_throughput if baseline_throughput else ""
        rows.append(
            [
                i,
                r.name,
                "true" if r.feasible else "false",
                r.memory.total / 1e9,
                s.overlapped_iter_time * 1e3,
                s.serialized_iter_time * 1e3,
                s.throughput,
                s.exposed_comm_fraction * 100.0,
                rel,
            ]
        )
    return rows


def sweep_csv(results: Sequence[PlanResult], unit: str, baseline_throughput: float | None = None) -> str:
    return csv_text(sweep_header(unit), sweep_rows(results, baseline_throughput))


def scale_csv(rows: Sequence[ScaleRow], unit: str) -> str:
    return csv_text(
        ["component", "factor", "iter_ms", f"throughput_{unit}_per_s", "speedup", "plan"],
        [[r.component, float(r.factor), r.iter_time * 1e3, r.throughput, r.speedup, r.plan] for r in rows],
    )
