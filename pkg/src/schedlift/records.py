"""Persistence and interchange: record store, descriptors, reports.

The tuning-record store is an append-only JSONL file indexed on open by
(kernel class, shape hash) and by source model. Model descriptors are JSON
files carrying either concrete kernels (ops, shapes, attrs, use counts) or
a class-proportion summary; the bundled fixture descriptors under
``fixtures/paper/`` are checksummed so tests catch any drift in the
encoded values.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .autoscheduler import TuningRecord
from .executor import MeasuredCost
from .loopnest import Shape, build_fused_kernel
from .schedule import deserialize, serialize
from .transfer import (
    ClassSummary,
    DescriptorError,
    ModelDescriptor,
    TransferReport,
    search_time_ledger,
)


def record_to_dict(record: TuningRecord) -> dict:
    return {
        "kernel_name": record.kernel_name,
        "kernel_class": record.kernel_class,
        "kernel_shapes": {r: list(s.dims) for r, s in sorted(record.kernel_shapes.items())},
        "kernel_attrs": dict(sorted(record.kernel_attrs.items())),
        "schedule": json.loads(serialize(record.schedule)),
        "cost": {
            "valid": record.cost.valid,
            "runs_ns": list(record.cost.runs_ns),
            "median_ns": record.cost.median_ns,
            "wall_ns": record.cost.wall_ns,
        },
        "source_model": record.source_model,
        "timestamp": record.timestamp,
        "fingerprint": record.fingerprint,
        "fallback": record.fallback,
    }


def record_from_dict(data: dict) -> TuningRecord:
    cost = data["cost"]
    return TuningRecord(
        kernel_name=data["kernel_name"],
        kernel_class=data["kernel_class"],
        kernel_shapes={r: Shape(tuple(d)) for r, d in data["kernel_shapes"].items()},
        kernel_attrs=dict(data.get("kernel_attrs", {})),
        schedule=deserialize(json.dumps(data["schedule"])),
        cost=MeasuredCost(
            valid=cost["valid"],
            runs_ns=tuple(cost["runs_ns"]),
            median_ns=cost["median_ns"],
            wall_ns=cost.get("wall_ns", 0),
        ),
        source_model=data["source_model"],
        timestamp=data["timestamp"],
        fingerprint=data["fingerprint"],
        fallback=data.get("fallback", False),
    )


class RecordStore:
    """Append-only JSONL store of tuning records.

    Reopening rebuilds an identical index. Duplicate (class, schedule)
    pairs are deduplicated at query time, never on write, so the file
    remains a faithful log.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: list[TuningRecord] = []
        self.class_index: dict[tuple[str, str], list[int]] = {}
        self.source_index: dict[str, list[int]] = {}
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._index(record_from_dict(json.loads(line)))

    def _index(self, record: TuningRecord) -> int:
        offset = len(self._records)
        self._records.append(record)
        shape_hash = record.fingerprint
        self.class_index.setdefault((record.kernel_class, shape_hash), []).append(offset)
        self.source_index.setdefault(record.source_model, []).append(offset)
        return offset

    def append(self, record: TuningRecord) -> int:
        if not record.cost.valid:
            raise ValueError("refusing to persist a record with an invalid cost")
        line = json.dumps(record_to_dict(record), sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
            return self._index(record)

    def __len__(self) -> int:
        return len(self._records)

    def all_records(self) -> list[TuningRecord]:
        with self._lock:
            return list(self._records)

    def query_class(self, class_id: str, sources=None) -> list[TuningRecord]:
        """Records of one class in append order, deduplicated by schedule."""
        source_set = None if sources is None else set(sources)
        out, seen = [], set()
        with self._lock:
            for record in self._records:
                if record.kernel_class != class_id:
                    continue
                if source_set is not None and record.source_model not in source_set:
                    continue
                text = serialize(record.schedule)
                if text in seen:
                    continue
                seen.add(text)
                out.append(record)
        return out

    def query_fingerprint(self, class_id: str, fingerprint: str) -> list[TuningRecord]:
        with self._lock:
            offsets = self.class_index.get((class_id, fingerprint), [])
            return [self._records[i] for i in offsets]

    def sources(self) -> list[str]:
        with self._lock:
            return sorted(self.source_index)


# --- model descriptors -------------------------------------------------------


def _path(where: str, key) -> str:
    return f"{where}.{key}" if where else str(key)


def _want(data: dict, key: str, kind, where: str):
    if key not in data:
        raise DescriptorError(f"{_path(where, key)}: missing required field")
    value = data[key]
    if not isinstance(value, kind):
        raise DescriptorError(
            f"{_path(where, key)}: expected {kind.__name__}, got {type(value).__name__}"
        )
    return value


def _kernel_from_dict(entry: dict, where: str):
    ops = _want(entry, "ops", list, where)
    shapes_raw = _want(entry, "shapes", dict, where)
    shapes = {}
    for role, dims in shapes_raw.items():
        if not isinstance(dims, list) or not all(isinstance(d, int) for d in dims):
            raise DescriptorError(f"{_path(where, 'shapes')}.{role}: expected a list of ints")
        shapes[role] = Shape(tuple(dims))
    attrs = entry.get("attrs", {})
    if not isinstance(attrs, dict):
        raise DescriptorError(f"{_path(where, 'attrs')}: expected an object")
    use = entry.get("use_count", 1)
    if not isinstance(use, int) or use < 1:
        raise DescriptorError(f"{_path(where, 'use_count')}: expected a positive int")
    try:
        spec = build_fused_kernel(ops, shapes, attrs, name=entry.get("name"))
    except Exception as exc:
        raise DescriptorError(f"{where}: {exc}") from exc
    return spec, use


def descriptor_from_dict(data: dict, origin: str = "") -> ModelDescriptor:
    name = _want(data, "name", str, origin)
    kernels = []
    for i, entry in enumerate(data.get("kernels", [])):
        if not isinstance(entry, dict):
            raise DescriptorError(f"{_path(origin, f'kernels[{i}]')}: expected an object")
        kernels.append(_kernel_from_dict(entry, _path(origin, f"kernels[{i}]")))
    summary = None
    if "class_proportions" in data:
        raw = _want(data, "class_proportions", dict, origin)
        summary = {}
        for label, entry in raw.items():
            where = f"{_path(origin, 'class_proportions')}.{label}"
            count = _want(entry, "kernels", int, where)
            percent = entry.get("percent")
            if not isinstance(percent, (int, float)):
                raise DescriptorError(f"{where}.percent: expected a number")
            summary[label] = ClassSummary(count, float(percent) / 100.0)
    try:
        return ModelDescriptor(
            name=name,
            kernels=kernels,
            supplied_summary=summary,
            label=str(data.get("label", "")),
            tuning_model=data.get("tuning_model"),
        )
    except DescriptorError as exc:
        raise DescriptorError(f"{origin or name}: {exc}") from exc


def load_descriptor(path) -> ModelDescriptor:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DescriptorError(f"{path}: invalid JSON at position {exc.pos}") from exc
    if not isinstance(data, dict):
        raise DescriptorError(f"{path}: descriptor must be a JSON object")
    return descriptor_from_dict(data, origin=path.name)


def descriptor_to_dict(model: ModelDescriptor) -> dict:
    out: dict = {"name": model.name}
    if model.label:
        out["label"] = model.label
    if model.tuning_model is not None:
        out["tuning_model"] = model.tuning_model
    out["kernels"] = [
        {
            "name": spec.name,
            "ops": [op.value for op in spec.ops],
            "shapes": {
                r: list(s.dims) for r, s in spec.shapes.items() if r not in ("output", "padded")
            },
            "attrs": dict(spec.attrs),
            "use_count": use,
        }
        for spec, use in model.kernels
    ]
    if model.supplied_summary is not None:
        out["class_proportions"] = {
            label: {"kernels": s.kernels, "percent": round(s.proportion * 100)}
            for label, s in model.supplied_summary.items()
        }
    return out


def save_descriptor(model: ModelDescriptor, path) -> None:
    Path(path).write_text(
        json.dumps(descriptor_to_dict(model), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


# --- bundled fixtures --------------------------------------------------------


def paper_fixtures_dir() -> Path:
    """Directory holding the bundled model-descriptor fixtures."""
    return Path(resources.files("schedlift") / "fixtures" / "paper")


def load_fixture_library(directory=None) -> dict[str, ModelDescriptor]:
    """Load every descriptor fixture, keyed by model name."""
    directory = Path(directory) if directory is not None else paper_fixtures_dir()
    out: dict[str, ModelDescriptor] = {}
    for path in sorted(directory.glob("*.json")):
        model = load_descriptor(path)
        out[model.name] = model
    if not out:
        raise DescriptorError(f"no descriptor fixtures found under {directory}")
    return out


def verify_fixture_checksums(directory=None) -> dict[str, str]:
    """Compare fixture files against the recorded checksums; raises on drift."""
    directory = Path(directory) if directory is not None else paper_fixtures_dir()
    sums_path = directory / "CHECKSUMS.sha256"
    if not sums_path.exists():
        raise DescriptorError(f"missing checksum manifest {sums_path}")
    recorded = {}
    for line in sums_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            digest, name = line.split()
            recorded[name] = digest
    actual = {}
    for path in sorted(directory.glob("*.json")):
        actual[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    if recorded != actual:
        drift = {
            name
            for name in set(recorded) | set(actual)
            if recorded.get(name) != actual.get(name)
        }
        raise DescriptorError(f"fixture drift detected in {sorted(drift)}")
    return actual


# --- report rendering --------------------------------------------------------


def report_to_dict(report: TransferReport, meta: dict | None = None) -> dict:
    out = {
        "target": report.target,
        "sources": list(report.sources) if report.sources is not None else None,
        "pool_mode": report.pool_mode,
        "speedup": report.speedup,
        "composed_median_ns": report.composed_cost.median_ns,
        "untuned_median_ns": report.untuned_cost.median_ns,
        "search_time": search_time_ledger(report),
        "per_kernel": [
            {
                "kernel": r.kernel_name,
                "class": r.kernel_class,
                "use_count": r.use_count,
                "chosen_source": r.chosen_source,
                "cost_ns": r.chosen_cost.median_ns,
                "baseline_ns": r.baseline.median_ns,
                "alternatives_tried": len(r.outcomes),
                "invalid_count": r.invalid_count,
                "fallback": r.fallback,
                "chosen_schedule": json.loads(serialize(r.chosen_schedule)),
            }
            for r in report.per_kernel
        ],
    }
    if meta:
        out["meta"] = dict(sorted(meta.items()))
    return out


def render_report(report: TransferReport, fmt: str, meta: dict | None = None) -> str:
    """Render a transfer report; output is byte-deterministic per report."""
    return render_report_data(report_to_dict(report, meta), fmt)


def render_report_data(data: dict, fmt: str) -> str:
    """Render a report dict (as produced by report_to_dict or read back)."""
    if fmt == "json":
        return json.dumps(data, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["kernel", "class", "chosen_source", "cost_ns", "invalid_count", "fallback"]
        )
        for r in data["per_kernel"]:
            writer.writerow(
                [
                    r["kernel"],
                    r["class"],
                    r["chosen_source"],
                    r["cost_ns"],
                    r["invalid_count"],
                    str(r["fallback"]).lower(),
                ]
            )
        return buf.getvalue()
    if fmt == "md":
        return _render_md(data)
    raise ValueError(f"unknown report format {fmt!r}")


def _render_md(data: dict) -> str:
    src = "pool of all records" if data["pool_mode"] else ", ".join(data["sources"])
    lines = [
        f"# Transfer report: {data['target']}",
        "",
        f"- tuned from: {src}",
        f"- composed cost: {data['composed_median_ns']} ns "
        f"(untuned {data['untuned_median_ns']} ns)",
        f"- speedup over untuned: {data['speedup']:.4f}x",
        f"- search time: {data['search_time']['total_ns']} ns",
        "",
        "| kernel | class | chosen source | cost (ns) | tried | invalid | fallback |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in data["per_kernel"]:
        lines.append(
            f"| {r['kernel']} | {r['class']} | {r['chosen_source']} | "
            f"{r['cost_ns']} | {r['alternatives_tried']} | {r['invalid_count']} | "
            f"{str(r['fallback']).lower()} |"
        )
    if data["pool_mode"]:
        lines += [
            "",
            "Note: winners are picked by standalone cost; a pooled full-program",
            "time can still regress because standalone timings do not capture",
            "inter-kernel effects. The composed cost above is measured, not",
            "summed from standalone medians.",
        ]
    if data.get("meta"):
        lines += ["", "## Provenance", ""]
        for k, v in sorted(data["meta"].items()):
            lines.append(f"- {k}: {v}")
    return "\n".join(lines) + "\n"
