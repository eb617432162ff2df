"""Schedule primitives and their application to kernel loop nests.

A schedule is an ordered list of loop transformations with shape-relative
parameters: splits store only the inner factor and recompute the outer
extent from the live extent at application time. That relative form is
what lets a schedule tuned on one kernel replay on a different kernel of
the same class; replays that do not fit the new shapes fail loudly with a
typed ScheduleError, never with a silently wrong nest.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Mapping, Union

from .loopnest import (
    Axis,
    KernelSpec,
    LoopNest,
    REDUCTION,
    SPATIAL,
    kernel_class_of,
)

# Error kinds (closed set).
UNKNOWN_AXIS = "UnknownAxis"
FACTOR_EXCEEDS_EXTENT = "FactorExceedsExtent"
NON_DIVISIBLE_SPLIT = "NonDivisibleSplit"
STRUCTURAL_MISMATCH = "StructuralMismatch"
INVALID_FUSE = "InvalidFuse"
INVALID_COMPUTE_AT = "InvalidComputeAt"


class ScheduleError(Exception):
    """A schedule failed to apply; ``kind`` is one of the closed error kinds."""

    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail


class ScheduleParseError(ValueError):
    """Raised when schedule text cannot be parsed; carries a position hint."""


@dataclass(frozen=True)
class Split:
    axis: str
    inner_factor: int

    def __post_init__(self):
        if self.inner_factor < 1:
            raise ValueError(f"split factor must be positive, got {self.inner_factor}")


@dataclass(frozen=True)
class Reorder:
    axes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.axes)) != len(self.axes):
            raise ValueError(f"reorder lists an axis twice: {self.axes}")


@dataclass(frozen=True)
class Fuse:
    outer: str
    inner: str
    result: str


@dataclass(frozen=True)
class Parallel:
    axis: str


@dataclass(frozen=True)
class Unroll:
    axis: str
    max_factor: int

    def __post_init__(self):
        if self.max_factor < 1:
            raise ValueError(f"unroll max factor must be positive, got {self.max_factor}")


@dataclass(frozen=True)
class Vectorize:
    axis: str


@dataclass(frozen=True)
class CacheWrite:
    tensor: str
    result_buffer: str


@dataclass(frozen=True)
class ComputeAt:
    buffer: str
    axis: str


SchedulePrimitive = Union[
    Split, Reorder, Fuse, Parallel, Unroll, Vectorize, CacheWrite, ComputeAt
]


@dataclass(frozen=True)
class Schedule:
    """Ordered transformation list plus the kernel class it was tuned on."""

    primitives: tuple[SchedulePrimitive, ...]
    origin: str
    origin_shape_note: str = ""


# --- axis provenance -------------------------------------------------------
#
# Every live axis knows how its loop variable reconstructs the base axes of
# the canonical nest: split parts contribute coef*value to one base axis,
# fused axes decompose by divmod into their two components.


@dataclass(frozen=True)
class SplitPart:
    base: str
    coef: int


@dataclass(frozen=True)
class FusedPair:
    left: "AxisOrigin"
    right: "AxisOrigin"
    right_extent: int


AxisOrigin = Union[SplitPart, FusedPair]


@dataclass(frozen=True)
class LiveAxis:
    name: str
    extent: int
    kind: str
    origin: AxisOrigin

    @property
    def fused(self) -> bool:
        return isinstance(self.origin, FusedPair)


def origin_leaves_of(origin: AxisOrigin, extent: int) -> list[tuple[str, int, int]]:
    """Flatten an origin to (base, coef, extent) split-part leaves."""
    if isinstance(origin, SplitPart):
        return [(origin.base, origin.coef, extent)]
    left_extent = extent // origin.right_extent
    return origin_leaves_of(origin.left, left_extent) + origin_leaves_of(
        origin.right, origin.right_extent
    )


@dataclass(frozen=True)
class ScheduledNest:
    """A schedule materialized against one kernel.

    ``axes`` is the transformed loop order; ``origins`` reconstructs base
    axis values from live loop variables; the statement body is unchanged
    from the kernel's canonical nest and still speaks in base axis names.
    """

    spec: KernelSpec
    axes: tuple[Axis, ...]
    origins: Mapping[str, AxisOrigin]
    annotations: Mapping[str, Mapping[str, int]]
    cache_buffers: tuple[tuple[str, str], ...]

    def position(self, name: str) -> int:
        for i, a in enumerate(self.axes):
            if a.name == name:
                return i
        raise KeyError(name)

    def coverage_products(self) -> dict[str, int]:
        """Product of leaf extents per base axis (must equal base extents)."""
        out: dict[str, int] = {}
        for axis in self.axes:
            for base, _, extent in origin_leaves_of(self.origins[axis.name], axis.extent):
                out[base] = out.get(base, 1) * extent
        return out


_SUFFIX_RE = re.compile(r"^(.*)_([oi]+)$")


def split_names(name: str) -> tuple[str, str]:
    """Deterministic (outer, inner) names of a split: the o/i suffix path."""
    m = _SUFFIX_RE.match(name)
    if m:
        base, suffix = m.group(1), m.group(2)
        return f"{base}_{suffix}o", f"{base}_{suffix}i"
    return f"{name}_o", f"{name}_i"


class _ApplyState:
    def __init__(self, spec: KernelSpec):
        self.axes: list[LiveAxis] = [
            LiveAxis(a.name, a.extent, a.kind, SplitPart(a.name, 1))
            for a in spec.nest.axes
        ]
        self.annotations: dict[str, dict[str, int]] = {}
        self.cache_buffer: str | None = None
        self.attach_axis: str | None = None

    def lookup(self, name: str) -> int:
        for i, axis in enumerate(self.axes):
            if axis.name == name:
                return i
        raise ScheduleError(UNKNOWN_AXIS, f"axis {name!r} is not live")

    def live_names(self) -> set[str]:
        return {a.name for a in self.axes}


def apply(schedule: Schedule, spec: KernelSpec) -> ScheduledNest:
    """Apply a schedule to a kernel's canonical nest.

    Raises ScheduleError on any validity violation. A successful result
    satisfies iteration-space coverage exactly; semantic equality with the
    reference executor is the executor module's contract.
    """
    if schedule.origin != kernel_class_of(spec):
        raise ScheduleError(
            STRUCTURAL_MISMATCH,
            f"schedule tuned for class {schedule.origin!r} applied to "
            f"{kernel_class_of(spec)!r}",
        )
    state = _ApplyState(spec)
    for prim in schedule.primitives:
        _apply_one(prim, state)
    return _finalize(schedule, spec, state)


def _apply_one(prim: SchedulePrimitive, state: _ApplyState) -> None:
    if isinstance(prim, Split):
        _apply_split(prim, state)
    elif isinstance(prim, Reorder):
        _apply_reorder(prim, state)
    elif isinstance(prim, Fuse):
        _apply_fuse(prim, state)
    elif isinstance(prim, Parallel):
        _annotate(state, prim.axis, "parallel", 1)
    elif isinstance(prim, Unroll):
        _annotate(state, prim.axis, "unroll", prim.max_factor)
    elif isinstance(prim, Vectorize):
        _annotate(state, prim.axis, "vectorize", 1)
    elif isinstance(prim, CacheWrite):
        _apply_cache_write(prim, state)
    elif isinstance(prim, ComputeAt):
        _apply_compute_at(prim, state)
    else:  # pragma: no cover
        raise ScheduleError(STRUCTURAL_MISMATCH, f"unknown primitive {prim!r}")


def _apply_split(prim: Split, state: _ApplyState) -> None:
    pos = state.lookup(prim.axis)
    axis = state.axes[pos]
    if axis.fused:
        raise ScheduleError(
            STRUCTURAL_MISMATCH, f"cannot split fused axis {axis.name!r}"
        )
    f = prim.inner_factor
    if f > axis.extent:
        raise ScheduleError(
            FACTOR_EXCEEDS_EXTENT,
            f"split factor {f} exceeds extent {axis.extent} of axis {axis.name!r}",
        )
    if axis.extent % f:
        raise ScheduleError(
            NON_DIVISIBLE_SPLIT,
            f"split factor {f} does not divide extent {axis.extent} of axis {axis.name!r}",
        )
    outer_name, inner_name = split_names(axis.name)
    taken = state.live_names() - {axis.name}
    if outer_name in taken or inner_name in taken:
        raise ScheduleError(
            STRUCTURAL_MISMATCH, f"split of {axis.name!r} collides with a live axis name"
        )
    part = axis.origin
    assert isinstance(part, SplitPart)
    outer = LiveAxis(outer_name, axis.extent // f, axis.kind, SplitPart(part.base, part.coef * f))
    inner = LiveAxis(inner_name, f, axis.kind, part)
    state.axes[pos : pos + 1] = [outer, inner]
    if state.attach_axis == axis.name:
        state.attach_axis = inner_name


def _apply_reorder(prim: Reorder, state: _ApplyState) -> None:
    positions = sorted(state.lookup(name) for name in prim.axes)
    reordered = [state.axes[state.lookup(name)] for name in prim.axes]
    for pos, axis in zip(positions, reordered):
        state.axes[pos] = axis


def _apply_fuse(prim: Fuse, state: _ApplyState) -> None:
    po = state.lookup(prim.outer)
    pi = state.lookup(prim.inner)
    if pi != po + 1:
        raise ScheduleError(
            INVALID_FUSE,
            f"axes {prim.outer!r} and {prim.inner!r} are not adjacent "
            f"(positions {po} and {pi})",
        )
    if prim.result in state.live_names():
        raise ScheduleError(
            INVALID_FUSE, f"fuse result name {prim.result!r} is already live"
        )
    outer, inner = state.axes[po], state.axes[pi]
    kind = SPATIAL if outer.kind == inner.kind == SPATIAL else REDUCTION
    fused = LiveAxis(
        prim.result,
        outer.extent * inner.extent,
        kind,
        FusedPair(outer.origin, inner.origin, inner.extent),
    )
    state.axes[po : pi + 1] = [fused]
    # Annotations and the cache attach point follow the fused result.
    for name in (prim.outer, prim.inner):
        if name in state.annotations:
            merged = state.annotations.pop(name)
            state.annotations.setdefault(prim.result, {}).update(merged)
        if state.attach_axis == name:
            state.attach_axis = prim.result


def _annotate(state: _ApplyState, axis: str, key: str, value: int) -> None:
    state.lookup(axis)
    slot = state.annotations.setdefault(axis, {})
    if key in slot:
        raise ScheduleError(STRUCTURAL_MISMATCH, f"duplicate {key} annotation on {axis!r}")
    slot[key] = value


def _apply_cache_write(prim: CacheWrite, state: _ApplyState) -> None:
    if prim.tensor != "output":
        raise ScheduleError(
            INVALID_COMPUTE_AT, f"cache write supports the output tensor only, got {prim.tensor!r}"
        )
    if state.cache_buffer is not None:
        raise ScheduleError(INVALID_COMPUTE_AT, "second cache write in one schedule")
    state.cache_buffer = prim.result_buffer


def _apply_compute_at(prim: ComputeAt, state: _ApplyState) -> None:
    if state.cache_buffer is None or prim.buffer != state.cache_buffer:
        raise ScheduleError(
            INVALID_COMPUTE_AT, f"compute_at names unknown buffer {prim.buffer!r}"
        )
    if state.attach_axis is not None:
        raise ScheduleError(INVALID_COMPUTE_AT, "cache buffer attached twice")
    pos = state.lookup(prim.axis)
    if state.axes[pos].kind != SPATIAL:
        raise ScheduleError(
            INVALID_COMPUTE_AT, f"attach axis {prim.axis!r} is a reduction axis"
        )
    state.attach_axis = prim.axis


def _finalize(schedule: Schedule, spec: KernelSpec, state: _ApplyState) -> ScheduledNest:
    axes = state.axes
    if state.cache_buffer is not None and state.attach_axis is None:
        raise ScheduleError(
            INVALID_COMPUTE_AT, f"cache buffer {state.cache_buffer!r} never attached"
        )
    if state.attach_axis is not None:
        attach_pos = next(i for i, a in enumerate(axes) if a.name == state.attach_axis)
        for i, axis in enumerate(axes):
            if axis.kind == REDUCTION and i <= attach_pos:
                raise ScheduleError(
                    INVALID_COMPUTE_AT,
                    f"reduction axis {axis.name!r} runs outside the cache tile",
                )
    for name, slots in state.annotations.items():
        if "vectorize" in slots:
            axis = axes[next(i for i, a in enumerate(axes) if a.name == name)]
            if axis.fused:
                raise ScheduleError(
                    STRUCTURAL_MISMATCH, f"cannot vectorize fused axis {name!r}"
                )
            if axes[-1].name != name:
                raise ScheduleError(
                    STRUCTURAL_MISMATCH, f"vectorized axis {name!r} is not innermost"
                )
    cache = (
        ((state.cache_buffer, state.attach_axis),) if state.cache_buffer is not None else ()
    )
    return ScheduledNest(
        spec=spec,
        axes=tuple(Axis(a.name, a.extent, a.kind) for a in axes),
        origins={a.name: a.origin for a in axes},
        annotations={k: dict(v) for k, v in state.annotations.items()},
        cache_buffers=cache,
    )


# --- persistence -----------------------------------------------------------
#
# One JSON object per schedule: {origin_class, origin_shape_note,
# primitives: [{op, ...args}]}. Field names and op tags are a stable
# on-disk contract.

_PRIM_TAGS = {
    Split: "split",
    Reorder: "reorder",
    Fuse: "fuse",
    Parallel: "parallel",
    Unroll: "unroll",
    Vectorize: "vectorize",
    CacheWrite: "cache_write",
    ComputeAt: "compute_at",
}


def _prim_to_dict(prim: SchedulePrimitive) -> dict:
    out = {"op": _PRIM_TAGS[type(prim)]}
    if isinstance(prim, Split):
        out.update(axis=prim.axis, inner_factor=prim.inner_factor)
    elif isinstance(prim, Reorder):
        out.update(axes=list(prim.axes))
    elif isinstance(prim, Fuse):
        out.update(outer=prim.outer, inner=prim.inner, result=prim.result)
    elif isinstance(prim, (Parallel, Vectorize)):
        out.update(axis=prim.axis)
    elif isinstance(prim, Unroll):
        out.update(axis=prim.axis, max_factor=prim.max_factor)
    elif isinstance(prim, CacheWrite):
        out.update(tensor=prim.tensor, result_buffer=prim.result_buffer)
    elif isinstance(prim, ComputeAt):
        out.update(buffer=prim.buffer, axis=prim.axis)
    return out


def serialize(schedule: Schedule) -> str:
    payload = {
        "origin_class": schedule.origin,
        "origin_shape_note": schedule.origin_shape_note,
        "primitives": [_prim_to_dict(p) for p in schedule.primitives],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _prim_from_dict(entry: dict, where: str) -> SchedulePrimitive:
    if not isinstance(entry, dict) or "op" not in entry:
        raise ScheduleParseError(f"{where}: primitive must be an object with an 'op' field")
    tag = entry["op"]
    args = {k: v for k, v in entry.items() if k != "op"}
    builders = {
        "split": (Split, {"axis": str, "inner_factor": int}),
        "reorder": (None, {"axes": list}),
        "fuse": (Fuse, {"outer": str, "inner": str, "result": str}),
        "parallel": (Parallel, {"axis": str}),
        "unroll": (Unroll, {"axis": str, "max_factor": int}),
        "vectorize": (Vectorize, {"axis": str}),
        "cache_write": (CacheWrite, {"tensor": str, "result_buffer": str}),
        "compute_at": (ComputeAt, {"buffer": str, "axis": str}),
    }
    if tag not in builders:
        raise ScheduleParseError(f"{where}: unknown primitive op {tag!r}")
    cls, fields = builders[tag]
    if set(args) != set(fields):
        raise ScheduleParseError(
            f"{where}: op {tag!r} expects fields {sorted(fields)}, got {sorted(args)}"
        )
    for key, want in fields.items():
        if want is int and (isinstance(args[key], bool) or not isinstance(args[key], int)):
            raise ScheduleParseError(f"{where}: field {key!r} must be an integer")
        if want is str and not isinstance(args[key], str):
            raise ScheduleParseError(f"{where}: field {key!r} must be a string")
        if want is list and not (
            isinstance(args[key], list) and all(isinstance(x, str) for x in args[key])
        ):
            raise ScheduleParseError(f"{where}: field {key!r} must be a list of strings")
    try:
        if tag == "reorder":
            return Reorder(axes=tuple(args["axes"]))
        return cls(**args)
    except ValueError as exc:
        raise ScheduleParseError(f"{where}: {exc}") from exc


def deserialize(text: str) -> Schedule:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScheduleParseError(f"invalid JSON at position {exc.pos}: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ScheduleParseError("schedule must be a JSON object")
    extra = set(payload) - {"origin_class", "origin_shape_note", "primitives"}
    if extra:
        raise ScheduleParseError(f"unknown schedule fields {sorted(extra)}")
    if "origin_class" not in payload or "primitives" not in payload:
        raise ScheduleParseError("schedule requires 'origin_class' and 'primitives'")
    if not isinstance(payload["origin_class"], str):
        raise ScheduleParseError("'origin_class' must be a string")
    if not isinstance(payload["primitives"], list):
        raise ScheduleParseError("'primitives' must be a list")
    prims = tuple(
        _prim_from_dict(entry, f"primitives[{i}]")
        for i, entry in enumerate(payload["primitives"])
    )
    return Schedule(
        primitives=prims,
        origin=payload["origin_class"],
        origin_shape_note=str(payload.get("origin_shape_note", "")),
    )


def untuned_schedule(origin: str) -> Schedule:
    """The empty schedule: the canonical nest itself, the default fallback."""
    return Schedule(primitives=(), origin=origin, origin_shape_note="untuned baseline")
