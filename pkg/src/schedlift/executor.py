"""Lowering and execution of scheduled nests, plus the measurement harness.

A ScheduledNest lowers to generated Python source whose leaves are numpy
operations over strided views of flat float64 buffers: the innermost one or
two loops of every statement region become a single array operation, outer
loops stay Python loops, unroll-annotated loops are expanded statically,
and a parallel-annotated outermost loop is dispatched in chunks over a
worker pool. Every candidate, the untuned baseline included, runs on this
one substrate, so measured costs are comparable even though their absolute
values are substrate-specific.

Measurement is globally serialized and every measured nanosecond lands in
a process-wide search-time ledger. A deterministic cost mode replaces wall
clock with an analytical proxy (weighted trip counts plus a workspace
footprint penalty) so search-driven tests can be bit-reproducible.
"""

from __future__ import annotations

import math
import os
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .loopnest import (
    ACCUMULATE,
    ASSIGN,
    BinOp,
    Const,
    INIT,
    KernelSpec,
    REDUCTION,
    Read,
    SPATIAL,
    Stmt,
    TensorRef,
    check_buffers,
    reference_execute,
)
from .schedule import ScheduledNest, origin_leaves_of

ENV_THREADS = "SCHEDLIFT_THREADS"
WALLCLOCK = "wallclock"
DETERMINISTIC = "deterministic"

# Deterministic-cost proxy weights (arbitrary ns-like units).
_COST_PY_ITER = 60.0
_COST_CALL = 900.0
_COST_ELEM = 2.0
_COST_STRIDED_FACTOR = 2.5
_COST_WORKSPACE = 10.0

# What one apply/lower attempt charges to the search-time ledger when the
# deterministic cost mode replaces wall clock.
DET_ATTEMPT_NS = 1_000_000


class LoweringError(Exception):
    """The scheduled nest cannot be lowered to a runnable plan."""


@dataclass(frozen=True)
class MeasureProtocol:
    """How a plan is timed. Defaults: 2 warmup runs, median of 10 timed runs."""

    warmup_runs: int = 2
    timed_runs: int = 10
    aggregate: str = "median"
    thread_count: int | None = None
    cost_mode: str = WALLCLOCK
    max_run_ms: float | None = None
    skip_estimate_factor: float = 20.0

    def __post_init__(self):
        if self.timed_runs < 1:
            raise ValueError("timed_runs must be >= 1")
        if self.warmup_runs < 0:
            raise ValueError("warmup_runs must be >= 0")
        if self.aggregate != "median":
            raise ValueError("only median aggregation is supported")
        if self.cost_mode not in (WALLCLOCK, DETERMINISTIC):
            raise ValueError(f"unknown cost mode {self.cost_mode!r}")
        if self.skip_estimate_factor < 1:
            raise ValueError("skip_estimate_factor must be >= 1")


@dataclass(frozen=True)
class MeasuredCost:
    """Cost of one measured plan; valid=False encodes unrunnable candidates."""

    valid: bool
    runs_ns: tuple[int, ...] = ()
    median_ns: int | None = None
    wall_ns: int = 0

    def __post_init__(self):
        if self.valid and (self.median_ns is None or not self.runs_ns):
            raise ValueError("a valid cost requires runs and a median")
        if not self.valid and self.median_ns is not None:
            raise ValueError("an invalid cost must leave the median unset")

    @classmethod
    def from_runs(cls, runs_ns, wall_ns: int) -> "MeasuredCost":
        runs = tuple(int(r) for r in runs_ns)
        return cls(True, runs, int(statistics.median(runs)), int(wall_ns))

    @classmethod
    def invalid(cls, wall_ns: int = 0) -> "MeasuredCost":
        return cls(False, (), None, int(wall_ns))


class SearchTimeLedger:
    """Thread-safe accumulator of measurement wall time, keyed by the caller."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict[tuple, int] = {}

    def add(self, key: tuple, ns: int) -> None:
        with self._lock:
            self._entries[key] = self._entries.get(key, 0) + int(ns)

    def total_ns(self) -> int:
        with self._lock:
            return sum(self._entries.values())

    def snapshot(self) -> dict[tuple, int]:
        with self._lock:
            return dict(self._entries)

    def reset(self) -> None:
        with self._lock:
            self._entries.clear()


GLOBAL_LEDGER = SearchTimeLedger()

_MEASUREMENT_LOCK = threading.Lock()
_POOL_LOCK = threading.Lock()
_POOL: ThreadPoolExecutor | None = None
_POOL_SIZE = 0


def _worker_pool(size: int) -> ThreadPoolExecutor:
    global _POOL, _POOL_SIZE
    with _POOL_LOCK:
        if _POOL is None or _POOL_SIZE < size:
            if _POOL is not None:
                _POOL.shutdown(wait=True)
            _POOL = ThreadPoolExecutor(max_workers=size, thread_name_prefix="schedlift")
            _POOL_SIZE = size
        return _POOL


def resolve_thread_count(protocol: MeasureProtocol | None = None) -> int:
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {env!r}") from exc
        if n < 1:
            raise ValueError(f"{ENV_THREADS} must be positive, got {n}")
        return n
    if protocol is not None and protocol.thread_count is not None:
        return max(1, protocol.thread_count)
    return min(4, os.cpu_count() or 1)


# View helpers injected into generated code. The first dimension indexes the
# flat element offset, so a hoisted view serves every iteration of the nest.


def _view1(buf, e1, w1):
    span = (e1 - 1) * w1
    return as_strided(buf, (buf.size - span, e1), (8, 8 * w1))


def _view2(buf, e2, w2, e1, w1):
    span = (e2 - 1) * w2 + (e1 - 1) * w1
    return as_strided(buf, (buf.size - span, e2, e1), (8, 8 * w2, 8 * w1))


_EXEC_GLOBALS = {"np": np, "_view1": _view1, "_view2": _view2}

_WORKSPACE = "__workspace__"


# --- resolved statements -----------------------------------------------------


@dataclass(frozen=True)
class _RRef:
    """A tensor reference resolved to a runtime buffer.

    ``tile=True`` addresses the cache workspace through the tile layout
    (mixed radix over the inner spatial leaves) instead of tensor strides.
    """

    buf: str
    ref: TensorRef
    tile: bool


@dataclass(frozen=True)
class _RRead:
    rref: _RRef


_RExpr = Union[_RRead, Const, BinOp]


@dataclass(frozen=True)
class _RStmt:
    target: _RRef
    expr: object
    mode: str
    combine: str
    axes: frozenset[str]


def _resolve_expr(expr, mapping: Callable[[TensorRef], _RRef]):
    if isinstance(expr, Const):
        return expr
    if isinstance(expr, Read):
        return _RRead(mapping(expr.ref))
    return BinOp(expr.op, _resolve_expr(expr.lhs, mapping), _resolve_expr(expr.rhs, mapping))


def _resolve_stmt(stmt: Stmt, mapping) -> _RStmt:
    return _RStmt(
        target=mapping(stmt.target),
        expr=_resolve_expr(stmt.expr, mapping),
        mode=stmt.mode,
        combine=stmt.combine,
        axes=frozenset(stmt.axes()),
    )


# --- the lowerer -------------------------------------------------------------


@dataclass
class _Loop:
    var: str
    extent: int
    kind: str
    fused: bool
    # (leaf var, base axis, coefficient, extent) outer-to-inner
    leaves: list[tuple[str, str, int, int]]
    parallel: bool = False
    unroll: int | None = None


class _Lowerer:
    def __init__(self, snest: ScheduledNest):
        self.snest = snest
        self.spec = snest.spec
        self.body_lines: list[str] = []
        self.view_defs: dict[tuple, str] = {}
        self.py_iters = 0.0
        self.calls = 0.0
        self.elem_cost = 0.0

        self.strides: dict[str, tuple[int, ...]] = {}
        for role, shape in self.spec.shapes.items():
            strides, acc = [], 1
            for d in reversed(shape.dims):
                strides.append(acc)
                acc *= d
            self.strides[role] = tuple(reversed(strides))

        self.loops: list[_Loop] = []
        for i, axis in enumerate(snest.axes):
            leaves = origin_leaves_of(snest.origins[axis.name], axis.extent)
            fused = len(leaves) > 1
            ann = snest.annotations.get(axis.name, {})
            self.loops.append(
                _Loop(
                    var=f"v{i}",
                    extent=axis.extent,
                    kind=axis.kind,
                    fused=fused,
                    leaves=[
                        (f"v{i}" if not fused else f"v{i}_{j}", base, coef, ext)
                        for j, (base, coef, ext) in enumerate(leaves)
                    ],
                    parallel="parallel" in ann,
                    unroll=ann.get("unroll"),
                )
            )

        flags = [i for i, l in enumerate(self.loops) if l.parallel]
        if len(flags) > 1:
            raise LoweringError("more than one parallel axis")
        if flags:
            if self.loops[flags[0]].kind != SPATIAL:
                raise LoweringError("parallel axis is a reduction axis")
            if flags[0] != 0:
                raise LoweringError("parallel axis is not outermost")
        self.parallel = bool(flags)

        # Statement regions: inits before the reduction block, the reduction
        # block itself, and elementwise epilogues after it.
        body = self.spec.nest.body
        red_bases = {a.name for a in self.spec.nest.axes if a.kind == REDUCTION}
        is_main = [bool(s.axes() & red_bases) for s in body]
        if not any(is_main):
            self.pre, self.mid, self.post = (), tuple(body), ()
        else:
            first = is_main.index(True)
            last = len(is_main) - 1 - is_main[::-1].index(True)
            self.pre = tuple(body[:first])
            self.mid = tuple(body[first : last + 1])
            self.post = tuple(body[last + 1 :])
        # First reduction loop: the init/epilogue hoist level. A nest with no
        # reductions is one big region so its leaves still vectorize.
        self.red_pos = next(
            (i for i, l in enumerate(self.loops) if l.kind == REDUCTION), 0
        )

        self.cache = snest.cache_buffers[0] if snest.cache_buffers else None
        self.tile_strides: dict[str, int] = {}
        self.tile_size = 0
        if self.cache is not None:
            self.attach_pos = self.snest.position(self.cache[1])
            acc = 1
            inner_spatial = [
                l for l in self.loops[self.attach_pos + 1 :] if l.kind == SPATIAL
            ]
            for loop in reversed(inner_spatial):
                for var, _, _, ext in reversed(loop.leaves):
                    self.tile_strides[var] = acc
                    acc *= ext
            self.tile_size = acc
        else:
            self.attach_pos = -1

    # -- reference resolution -------------------------------------------

    def _mapping(self, cached_zone: bool):
        def resolve(ref: TensorRef) -> _RRef:
            if cached_zone and ref.role == "output":
                return _RRef(_WORKSPACE, ref, tile=True)
            return _RRef(ref.role, ref, tile=False)

        return resolve

    def _weight(self, rref: _RRef, leaf_var: str, leaf_base: str, coef: int) -> int:
        if rref.tile:
            return self.tile_strides.get(leaf_var, 0)
        strides = self.strides[rref.buf]
        total = 0
        for dim, idx in enumerate(rref.ref.indices):
            total += strides[dim] * idx.coef(leaf_base)
        return total * coef

    def _const(self, rref: _RRef) -> int:
        if rref.tile:
            return 0
        strides = self.strides[rref.buf]
        return sum(strides[dim] * idx.const for dim, idx in enumerate(rref.ref.indices))

    def _vec_ws(self, rref: _RRef, vec: list[_Loop]) -> list[tuple[int, int]]:
        out = []
        for loop in vec:
            var, base, coef, ext = loop.leaves[0]
            out.append((ext, self._weight(rref, var, base, coef)))
        return out

    def _offset(self, rref: _RRef, bindings, vec_vars: set[str]) -> str:
        terms = []
        const = self._const(rref)
        for leaf_var, leaf_base, coef, bound in bindings:
            if leaf_var in vec_vars:
                continue
            w = self._weight(rref, leaf_var, leaf_base, coef)
            if w == 0:
                continue
            if isinstance(bound, int):
                const += w * bound
            elif w == 1:
                terms.append(bound)
            else:
                terms.append(f"{w}*{bound}")
        if const or not terms:
            terms.append(str(const))
        return "+".join(terms)

    def _view(self, buf: str, ws: list[tuple[int, int]]) -> str:
        key = (buf, tuple(ws))
        if key not in self.view_defs:
            self.view_defs[key] = f"_V{len(self.view_defs)}"
        return self.view_defs[key]

    # -- statement emission ----------------------------------------------

    def _emit(self, depth: int, text: str):
        self.body_lines.append("    " * depth + text)

    def _elem_units(self, ws) -> float:
        elems = 1.0
        for ext, _ in ws:
            elems *= ext
        pen = _COST_ELEM if ws[-1][1] in (0, 1) else _COST_ELEM * _COST_STRIDED_FACTOR
        return elems * pen

    def emit_stmt(self, depth: int, stmt: _RStmt, bindings, vec: list[_Loop], mult: float):
        vec_vars = {l.leaves[0][0] for l in vec}
        self.calls += mult

        if stmt.mode == ACCUMULATE:
            for loop in vec:
                if loop.leaves[0][1] not in stmt.axes:
                    raise LoweringError(
                        f"accumulate does not cover vector axis {loop.leaves[0][1]!r}"
                    )

        def piece(expr) -> tuple[str, bool]:
            if isinstance(expr, Const):
                v = float(expr.value)
                return (repr(v) if math.isfinite(v) else f"float({str(v)!r})"), False
            if isinstance(expr, _RRead):
                rref = expr.rref
                ws = self._vec_ws(rref, vec)
                off = self._offset(rref, bindings, vec_vars)
                if any(w for _, w in ws):
                    self.elem_cost += mult * self._elem_units(ws)
                    return f"{self._view(rref.buf, ws)}[{off}]", True
                return f"_b[{rref.buf!r}][{off}]", False
            ls, la = piece(expr.lhs)
            rs, ra = piece(expr.rhs)
            if expr.op == "add":
                return f"({ls} + {rs})", la or ra
            if expr.op == "mul":
                return f"({ls} * {rs})", la or ra
            return f"np.maximum({ls}, {rs})", la or ra

        t_ws = self._vec_ws(stmt.target, vec)
        t_off = self._offset(stmt.target, bindings, vec_vars)
        t_varies = [bool(w) for _, w in t_ws]
        if any(t_varies):
            self.elem_cost += mult * self._elem_units(t_ws)

        dot = self._try_dot(stmt, bindings, vec, vec_vars, t_varies, mult)
        if dot is not None:
            expr_s, expr_arr = dot, True
        else:
            expr_s, expr_arr = piece(stmt.expr)

        if not any(t_varies):
            tgt = f"_b[{stmt.target.buf!r}][{t_off}]"
            if stmt.mode in (INIT, ASSIGN):
                self._emit(depth, f"{tgt} = {expr_s}")
            elif not expr_arr:
                if stmt.combine == "add":
                    self._emit(depth, f"{tgt} += {expr_s}")
                else:
                    self._emit(depth, f"{tgt} = max({tgt}, {expr_s})")
            elif stmt.combine == "add":
                self._emit(depth, f"{tgt} += {expr_s}" if dot else f"{tgt} += ({expr_s}).sum()")
            else:
                self._emit(depth, f"{tgt} = max({tgt}, ({expr_s}).max())")
            return

        if all(t_varies):
            tgt = f"{self._view(stmt.target.buf, t_ws)}[{t_off}]"
            if stmt.mode in (INIT, ASSIGN):
                self._emit(depth, f"{tgt} = {expr_s}")
            elif stmt.combine == "add":
                self._emit(depth, f"{tgt} += {expr_s}")
            else:
                self._emit(depth, f"np.maximum({tgt}, {expr_s}, out={tgt})")
            return

        # The target varies on exactly one of two vector axes: narrow it to
        # a 1-D view and reduce the expression over the axis it lacks.
        if stmt.mode in (INIT, ASSIGN):
            raise LoweringError("assignment target misses a vector axis")
        (vi,) = [i for i, v in enumerate(t_varies) if v]
        reduce_axis = 1 - vi
        tgt = f"{self._view(stmt.target.buf, [t_ws[vi]])}[{t_off}]"
        if dot is not None:
            self._emit(depth, f"{tgt} += {expr_s}")
        elif stmt.combine == "add":
            self._emit(depth, f"{tgt} += ({expr_s}).sum(axis={reduce_axis})")
        else:
            self._emit(
                depth, f"np.maximum({tgt}, ({expr_s}).max(axis={reduce_axis}), out={tgt})"
            )

    def _try_dot(self, stmt: _RStmt, bindings, vec, vec_vars, t_varies, mult):
        """np.dot specialization for multiply-accumulate reductions."""
        if stmt.mode != ACCUMULATE or stmt.combine != "add" or not vec:
            return None
        expr = stmt.expr
        if not isinstance(expr, BinOp) or expr.op != "mul":
            return None
        if not isinstance(expr.lhs, _RRead) or not isinstance(expr.rhs, _RRead):
            return None
        sides = []
        for node in (expr.lhs, expr.rhs):
            ws = self._vec_ws(node.rref, vec)
            off = self._offset(node.rref, bindings, vec_vars)
            sides.append((node.rref.buf, ws, off))

        if len(vec) == 1:
            if t_varies[0]:
                return None
            (ba, wsa, offa), (bb, wsb, offb) = sides
            if not (wsa[0][1] and wsb[0][1]):
                return None
            va = f"{self._view(ba, wsa)}[{offa}]"
            vb = f"{self._view(bb, wsb)}[{offb}]"
            self.elem_cost += 0.5 * mult * (self._elem_units(wsa) + self._elem_units(wsb))
            return f"np.dot({va}, {vb})"

        reduce_axes = [i for i, v in enumerate(t_varies) if not v]
        if len(reduce_axes) != 1:
            return None
        r = reduce_axes[0]
        k = 1 - r

        def kind(ws):
            return bool(ws[r][1]), bool(ws[k][1])

        (ba, wsa, offa), (bb, wsb, offb) = sides
        if kind(wsa) == (True, False) and kind(wsb) == (True, True):
            v_side, m_side = (ba, wsa, offa), (bb, wsb, offb)
        elif kind(wsb) == (True, False) and kind(wsa) == (True, True):
            v_side, m_side = (bb, wsb, offb), (ba, wsa, offa)
        else:
            return None
        vb, vws, voff = v_side
        mb, mws, moff = m_side
        self.elem_cost += 0.5 * mult * (
            self._elem_units([vws[r]]) + self._elem_units(mws)
        )
        v = f"{self._view(vb, [vws[r]])}[{voff}]"
        m = f"{self._view(mb, mws)}[{moff}]"
        if r == 0:
            return f"np.dot({v}, {m})"
        return f"np.dot({m}, {v})"

    # -- loop emission -----------------------------------------------------

    def _vec_tail(self, loop_idxs: list[int]) -> list[int]:
        vec: list[int] = []
        for idx in reversed(loop_idxs):
            loop = self.loops[idx]
            if loop.fused or loop.parallel or len(vec) == 2:
                break
            vec.append(idx)
        vec.reverse()
        return vec

    def emit_loops(self, depth, loop_idxs, bindings, mult, leaf):
        if not loop_idxs:
            leaf(depth, bindings, mult)
            return
        idx, rest = loop_idxs[0], loop_idxs[1:]
        loop = self.loops[idx]
        if (
            loop.unroll is not None
            and loop.extent <= loop.unroll
            and not loop.parallel
            and idx != 0
        ):
            for value in range(loop.extent):
                self.emit_loops(
                    depth, rest, bindings + self._bind_const(loop, value), mult, leaf
                )
            return
        self.py_iters += mult * loop.extent
        lo, hi = ("_lo", "_hi") if idx == 0 else ("0", str(loop.extent))
        self._emit(depth, f"for {loop.var} in range({lo}, {hi}):")
        b = bindings + self._bind_var(depth + 1, loop)
        self.emit_loops(depth + 1, rest, b, mult * loop.extent, leaf)

    def _bind_var(self, depth, loop):
        if not loop.fused:
            var, base, coef, _ = loop.leaves[0]
            return [(var, base, coef, var)]
        out = []
        exts = [ext for _, _, _, ext in loop.leaves]
        rem = loop.var
        for j, (var, base, coef, _) in enumerate(loop.leaves):
            tail = math.prod(exts[j + 1 :])
            if j < len(loop.leaves) - 1:
                self._emit(depth, f"{var}, {loop.var}r{j} = divmod({rem}, {tail})")
                rem = f"{loop.var}r{j}"
            else:
                self._emit(depth, f"{var} = {rem}")
            out.append((var, base, coef, var))
        return out

    def _bind_const(self, loop, value: int):
        out = []
        exts = [ext for _, _, _, ext in loop.leaves]
        rem = value
        for j, (var, base, coef, _) in enumerate(loop.leaves):
            tail = math.prod(exts[j + 1 :])
            leaf_val, rem = divmod(rem, tail)
            out.append((var, base, coef, leaf_val))
        return out

    def emit_region(self, depth, loop_idxs, stmts, bindings, mult):
        if not stmts:
            return
        vec_idx = self._vec_tail(loop_idxs)
        py_idx = [i for i in loop_idxs if i not in vec_idx]
        vec = [self.loops[i] for i in vec_idx]

        def leaf(d, b, m):
            for stmt in stmts:
                self.emit_stmt(d, stmt, b, vec, m)

        self.emit_loops(depth, py_idx, bindings, mult, leaf)

    # -- whole-plan emission -------------------------------------------------

    def lower_source(self) -> str:
        n = len(self.loops)
        cached = self.cache is not None
        zone_start = self.attach_pos + 1 if cached else 0
        outer = list(range(0, zone_start))
        shared = [i for i in range(zone_start, min(self.red_pos, n))]
        tail = [i for i in range(max(self.red_pos, zone_start), n)]
        mini = [i for i in tail if self.loops[i].kind == SPATIAL]

        compute_map = self._mapping(cached_zone=cached)
        pre = tuple(_resolve_stmt(s, compute_map) for s in self.pre)
        mid = tuple(_resolve_stmt(s, compute_map) for s in self.mid)
        post = tuple(_resolve_stmt(s, compute_map) for s in self.post)

        def compute(depth, bindings, mult):
            self.emit_region(depth, mini, pre, bindings, mult)
            self.emit_region(depth, tail, mid, bindings, mult)
            self.emit_region(depth, mini, post, bindings, mult)

        if cached:
            out_target = next(
                s.target for s in self.spec.nest.body if s.target.role == "output"
            )
            flush = _RStmt(
                target=_RRef("output", out_target, tile=False),
                expr=_RRead(_RRef(_WORKSPACE, out_target, tile=True)),
                mode=ASSIGN,
                combine="add",
                axes=frozenset(out_target.axes()),
            )
            tile_spatial = [
                i for i in range(zone_start, n) if self.loops[i].kind == SPATIAL
            ]

            def zone(depth, bindings, mult):
                self.emit_loops(
                    depth,
                    shared,
                    bindings,
                    mult,
                    lambda d, b, m: compute(d, b, m),
                )
                self.emit_region(depth, tile_spatial, (flush,), bindings, mult)

            self.emit_loops(0, outer, [], 1.0, zone)
        else:
            self.emit_loops(0, shared, [], 1.0, compute)

        prologue = []
        if cached:
            prologue.append(
                f"    _b[{_WORKSPACE!r}] = np.empty({self.tile_size}, dtype=np.float64)"
            )
        for (buf, ws), name in self.view_defs.items():
            if len(ws) == 1:
                (e1, w1) = ws[0]
                prologue.append(f"    {name} = _view1(_b[{buf!r}], {e1}, {w1})")
            else:
                (e2, w2), (e1, w1) = ws
                prologue.append(
                    f"    {name} = _view2(_b[{buf!r}], {e2}, {w2}, {e1}, {w1})"
                )
        body = [f"    {ln}" if ln else ln for ln in self.body_lines]
        return "\n".join(
            ["def _kernel(_b, _lo, _hi):"] + prologue + body + ["    return None", ""]
        )

    def det_cost(self) -> int:
        cost = (
            _COST_PY_ITER * self.py_iters
            + _COST_CALL * self.calls
            + self.elem_cost
            + _COST_WORKSPACE * self.tile_size
        )
        return max(1, int(cost))


@dataclass(frozen=True)
class ExecutablePlan:
    """A compiled, runnable lowering of one (kernel, schedule) pair."""

    spec: KernelSpec
    source: str
    fn: Callable
    outer_extent: int
    parallel: bool
    parallel_proof: str | None
    workspace_elems: int
    det_cost_ns: int

    def bind(self, inputs: Mapping[str, np.ndarray]) -> "BoundBuffers":
        shaped = check_buffers(self.spec, inputs)
        flat = {role: np.ascontiguousarray(arr).ravel() for role, arr in shaped.items()}
        out_shape = self.spec.shapes["output"].dims
        flat["output"] = np.full(math.prod(out_shape), np.nan, dtype=np.float64)
        pad_fill = None
        if "padded" in self.spec.shapes:
            pdims = self.spec.shapes["padded"].dims
            pbuf = np.zeros(math.prod(pdims), dtype=np.float64)
            flat["padded"] = pbuf
            pview = pbuf.reshape(pdims)
            iview = flat["input"].reshape(self.spec.shapes["input"].dims)
            pad = int(self.spec.attrs.get("pad", 0))

            def pad_fill():
                pview[:, :, pad:-pad, pad:-pad] = iview

        return BoundBuffers(flat, pad_fill, out_shape)

    def run(self, bound: "BoundBuffers", threads: int = 1) -> None:
        if bound.pad_fill is not None:
            bound.pad_fill()
        if self.parallel and threads > 1 and self.outer_extent > 1:
            n = min(threads, self.outer_extent)
            pool = _worker_pool(n)
            step = (self.outer_extent + n - 1) // n
            futures = []
            for c in range(n):
                lo, hi = c * step, min((c + 1) * step, self.outer_extent)
                if lo >= hi:
                    break
                futures.append(pool.submit(self.fn, dict(bound.flat), lo, hi))
            for f in futures:
                f.result()
        else:
            self.fn(dict(bound.flat), 0, self.outer_extent)

    def output(self, bound: "BoundBuffers") -> np.ndarray:
        return bound.flat["output"].reshape(bound.out_shape).copy()


@dataclass
class BoundBuffers:
    flat: dict[str, np.ndarray]
    pad_fill: Callable | None
    out_shape: tuple[int, ...]


def lower(snest: ScheduledNest) -> ExecutablePlan:
    """Lower a scheduled nest to an executable plan.

    Raises LoweringError when annotations cannot be realized (a parallel
    reduction axis, a non-outermost parallel axis, an uncovered accumulate).
    """
    low = _Lowerer(snest)
    source = low.lower_source()
    code = compile(source, "<schedlift-plan>", "exec")
    ns: dict = {}
    exec(code, dict(_EXEC_GLOBALS), ns)
    proof = None
    if low.parallel:
        proof = (
            "parallel axis is an outermost spatial loop; spatial split leaves "
            "form a mixed-radix bijection onto output coordinates, so chunks "
            "write disjoint output regions; one private workspace per task"
        )
    return ExecutablePlan(
        spec=snest.spec,
        source=source,
        fn=ns["_kernel"],
        outer_extent=low.loops[0].extent,
        parallel=low.parallel,
        parallel_proof=proof,
        workspace_elems=low.tile_size,
        det_cost_ns=low.det_cost(),
    )


def execute(plan: ExecutablePlan, inputs: Mapping[str, np.ndarray], threads: int | None = None) -> np.ndarray:
    """Run the plan once over the given buffers and return the output."""
    bound = plan.bind(inputs)
    plan.run(bound, threads if threads is not None else resolve_thread_count())
    return plan.output(bound)


def measure(
    plan: ExecutablePlan,
    inputs: Mapping[str, np.ndarray],
    protocol: MeasureProtocol | None = None,
    ledger_key: tuple = ("unattributed",),
    ledger: SearchTimeLedger | None = None,
) -> MeasuredCost:
    """Measure a plan under the protocol; all measure calls serialize globally.

    In deterministic cost mode no wall clock is read: every run reports the
    plan's analytical cost and the ledger is charged as if each run had
    taken exactly that long.
    """
    protocol = protocol or MeasureProtocol()
    ledger = ledger if ledger is not None else GLOBAL_LEDGER
    if protocol.cost_mode == DETERMINISTIC:
        runs = (plan.det_cost_ns,) * protocol.timed_runs
        as_if = plan.det_cost_ns * (protocol.warmup_runs + protocol.timed_runs)
        ledger.add(ledger_key, as_if)
        return MeasuredCost.from_runs(runs, as_if)

    threads = resolve_thread_count(protocol)
    cap_ns = None if protocol.max_run_ms is None else int(protocol.max_run_ms * 1e6)
    # The cap can only stop between runs, so candidates whose analytical
    # estimate is hopeless against it are not run at all; the proxy cost
    # stands in, far above anything competitive.
    if cap_ns is not None and plan.det_cost_ns > protocol.skip_estimate_factor * cap_ns:
        return MeasuredCost.from_runs((plan.det_cost_ns,), 0)
    with _MEASUREMENT_LOCK:
        bound = plan.bind(inputs)
        started = time.perf_counter_ns()
        for _ in range(protocol.warmup_runs):
            plan.run(bound, threads)
            if cap_ns is not None and time.perf_counter_ns() - started > cap_ns:
                break
        runs = []
        for _ in range(protocol.timed_runs):
            t0 = time.perf_counter_ns()
            plan.run(bound, threads)
            runs.append(time.perf_counter_ns() - t0)
            if cap_ns is not None and time.perf_counter_ns() - started > cap_ns:
                break
        wall = time.perf_counter_ns() - started
    ledger.add(ledger_key, wall)
    return MeasuredCost.from_runs(runs, wall)


@dataclass(frozen=True)
class VerifyReport:
    passed: bool
    trials: int
    max_abs_err: float
    max_rel_err: float
    detail: str = ""


def verify(
    plan: ExecutablePlan,
    trials: int = 3,
    seed: int = 0,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    threads: int | None = None,
) -> VerifyReport:
    """Compare plan output with the reference executor on random inputs.

    An element fails when its absolute error exceeds both the absolute
    floor and rtol times the reference magnitude.
    """
    rng = np.random.default_rng(seed)
    max_abs = 0.0
    max_rel = 0.0
    for t in range(trials):
        inputs = {
            role: rng.uniform(-1.0, 1.0, size=plan.spec.shapes[role].dims)
            for role in plan.spec.input_roles()
        }
        got = execute(plan, inputs, threads=threads)
        want = reference_execute(plan.spec, inputs)
        err = np.abs(got - want)
        bad = err > np.maximum(atol, rtol * np.abs(want))
        max_abs = max(max_abs, float(err.max(initial=0.0)))
        denom = np.maximum(np.abs(want), 1e-30)
        max_rel = max(max_rel, float((err / denom).max(initial=0.0)))
        if bad.any() or not np.isfinite(got).all():
            where = np.argwhere(bad)[:3].tolist() if bad.any() else "non-finite"
            return VerifyReport(
                False, t + 1, max_abs, max_rel, f"mismatch at indices {where}"
            )
    return VerifyReport(True, trials, max_abs, max_rel)
