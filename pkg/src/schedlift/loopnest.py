"""Loop-nest IR for small dense tensor kernels.

A kernel is a fused sequence of tensor operations with concrete shapes,
expressed as one canonical loop nest over flat row-major float64 buffers.
The nest is derived deterministically from the op sequence and shapes, so
two kernels built from the same inputs are structurally identical.

The module also provides the kernel-class fingerprint (the shape-free
identity used to decide schedule compatibility) and a reference executor
that interprets the canonical nest directly; the reference executor is the
correctness oracle for everything the scheduled execution path produces.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

import numpy as np


class KernelBuildError(ValueError):
    """Raised when a kernel cannot be constructed from the given pieces."""


class UnsupportedSequenceError(KernelBuildError):
    """Raised for an op sequence the builders do not know how to fuse."""


class OpKind(enum.Enum):
    """Closed set of supported operation tags.

    The enum value is the token the tag contributes to a kernel-class id.
    """

    MATMUL = "matmul"
    CONV2D = "conv2d"
    PAD = "pad"
    BIAS_ADD = "bias"
    ELEM_ADD = "add"
    RELU = "relu"
    MAX_POOL2D = "max_pool2d"
    GLOBAL_AVG_POOL2D = "global_avg_pool2d"
    DENSE = "dense"

    @classmethod
    def from_name(cls, name: str) -> "OpKind":
        for kind in cls:
            if kind.name.lower() == name.lower() or kind.value == name:
                return kind
        raise KernelBuildError(f"unknown op tag: {name!r}")


# Ops that may follow a producing op inside the same loop structure.
_EPILOGUE_OPS = (OpKind.BIAS_ADD, OpKind.ELEM_ADD, OpKind.RELU)


@dataclass(frozen=True)
class Shape:
    """Concrete dense shape; every extent is a positive element count."""

    dims: tuple[int, ...]

    def __post_init__(self):
        if not self.dims:
            raise KernelBuildError("shape must have at least one dimension")
        for d in self.dims:
            if not isinstance(d, int) or d < 1:
                raise KernelBuildError(f"shape extents must be positive ints, got {self.dims}")

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    @property
    def rank(self) -> int:
        return len(self.dims)


SPATIAL = "spatial"
REDUCTION = "reduction"


@dataclass(frozen=True)
class Axis:
    """A loop of the canonical nest. Reduction axes never index the output."""

    name: str
    extent: int
    kind: str

    def __post_init__(self):
        if self.extent < 1:
            raise KernelBuildError(f"axis {self.name} has non-positive extent {self.extent}")
        if self.kind not in (SPATIAL, REDUCTION):
            raise KernelBuildError(f"axis {self.name} has unknown kind {self.kind!r}")


@dataclass(frozen=True)
class IndexExpr:
    """Affine index: sum of coef*axis terms plus a constant offset."""

    terms: tuple[tuple[str, int], ...] = ()
    const: int = 0

    def axes(self) -> set[str]:
        return {name for name, _ in self.terms}

    def coef(self, axis: str) -> int:
        for name, c in self.terms:
            if name == axis:
                return c
        return 0

    def evaluate(self, env: Mapping[str, int]) -> int:
        return self.const + sum(c * env[name] for name, c in self.terms)


def ix(*terms, const: int = 0) -> IndexExpr:
    """Build an IndexExpr from axis names or (name, coef) pairs."""
    out = []
    for t in terms:
        if isinstance(t, str):
            out.append((t, 1))
        else:
            out.append((t[0], int(t[1])))
    return IndexExpr(terms=tuple(out), const=const)


@dataclass(frozen=True)
class TensorRef:
    role: str
    indices: tuple[IndexExpr, ...]

    def axes(self) -> set[str]:
        out: set[str] = set()
        for idx in self.indices:
            out |= idx.axes()
        return out


@dataclass(frozen=True)
class Read:
    ref: TensorRef


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class BinOp:
    op: str  # "add" | "mul" | "max"
    lhs: "Expr"
    rhs: "Expr"

    def __post_init__(self):
        if self.op not in ("add", "mul", "max"):
            raise KernelBuildError(f"unknown arithmetic op {self.op!r}")


Expr = Union[Read, Const, BinOp]


def expr_axes(expr: Expr) -> set[str]:
    if isinstance(expr, Read):
        return expr.ref.axes()
    if isinstance(expr, Const):
        return set()
    return expr_axes(expr.lhs) | expr_axes(expr.rhs)


INIT = "init"
ACCUMULATE = "accumulate"
ASSIGN = "assign"


@dataclass(frozen=True)
class Stmt:
    """One statement of the nest body.

    ``combine`` selects the reduction operator for accumulate statements
    (``add`` or ``max``); init and assign statements ignore it.
    """

    target: TensorRef
    expr: Expr
    mode: str
    combine: str = "add"

    def __post_init__(self):
        if self.mode not in (INIT, ACCUMULATE, ASSIGN):
            raise KernelBuildError(f"unknown stmt mode {self.mode!r}")
        if self.combine not in ("add", "max"):
            raise KernelBuildError(f"unknown combine op {self.combine!r}")

    def axes(self) -> set[str]:
        return self.target.axes() | expr_axes(self.expr)


@dataclass(frozen=True)
class LoopNest:
    axes: tuple[Axis, ...]
    body: tuple[Stmt, ...]

    def __post_init__(self):
        names = [a.name for a in self.axes]
        if len(set(names)) != len(names):
            raise KernelBuildError(f"duplicate axis names in nest: {names}")
        declared = set(names)
        reductions = {a.name for a in self.axes if a.kind == REDUCTION}
        saw_init_for: set[str] = set()
        for stmt in self.body:
            loose = stmt.axes() - declared
            if loose:
                raise KernelBuildError(f"statement references undeclared axes {sorted(loose)}")
            tgt_red = stmt.target.axes() & reductions
            if tgt_red and stmt.target.role == "output":
                raise KernelBuildError(
                    f"reduction axes {sorted(tgt_red)} index the output tensor"
                )
            if stmt.mode == ACCUMULATE and expr_axes(stmt.expr) & reductions:
                if stmt.target.role not in saw_init_for:
                    raise KernelBuildError(
                        f"accumulate into {stmt.target.role!r} has no preceding init"
                    )
            if stmt.mode in (INIT, ASSIGN):
                saw_init_for.add(stmt.target.role)

    def axis(self, name: str) -> Axis:
        for a in self.axes:
            if a.name == name:
                return a
        raise KeyError(name)


# A kernel class is the op-tag sequence alone; shapes and attrs are ignored.
KernelClassId = str


@dataclass(frozen=True)
class KernelSpec:
    """A declarative small tensor kernel: the unit of tuning.

    ``shapes`` maps tensor roles (input, weights, bias, residual, output,
    and the derived ``padded`` role) to concrete shapes. ``attrs`` holds
    integer op parameters such as stride, padding, and pool size; they are
    not part of the kernel class.
    """

    name: str
    ops: tuple[OpKind, ...]
    shapes: Mapping[str, Shape]
    attrs: Mapping[str, int]
    nest: LoopNest

    def input_roles(self) -> list[str]:
        return [r for r in self.shapes if r not in ("output", "padded")]


def kernel_class_of(spec: KernelSpec) -> KernelClassId:
    """Shape-independent class id: op tokens joined with underscores."""
    return "_".join(op.value for op in spec.ops)


def class_id_of_ops(ops: Iterable[OpKind]) -> KernelClassId:
    return "_".join(op.value for op in ops if op is not OpKind.PAD)


def class_to_ops(class_id: KernelClassId) -> tuple[OpKind, ...]:
    """Recover the op sequence from a class id (greedy longest-token match)."""
    tokens = sorted((op.value for op in OpKind if op is not OpKind.PAD), key=len, reverse=True)
    ops: list[OpKind] = []
    rest = class_id
    while rest:
        for token in tokens:
            if rest == token or rest.startswith(token + "_"):
                ops.append(OpKind(token))
                rest = rest[len(token) + 1 :]
                break
        else:
            raise KernelBuildError(f"cannot parse kernel class id {class_id!r}")
    if not ops:
        raise KernelBuildError("empty kernel class id")
    return tuple(ops)


def kernel_fingerprint(spec: KernelSpec) -> str:
    """Workload id: hash of the kernel's key parameters (ops, shapes, attrs)."""
    payload = {
        "ops": [op.value for op in spec.ops],
        "shapes": {role: list(shape.dims) for role, shape in sorted(spec.shapes.items())},
        "attrs": {k: v for k, v in sorted(spec.attrs.items())},
    }
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8"))
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Builders


def _out_ref(axes: Iterable[str]) -> TensorRef:
    return TensorRef("output", tuple(ix(a) for a in axes))


def build_matmul(n: int, m: int, k: int, name: str | None = None) -> KernelSpec:
    """Row-major matrix multiply C[n,m] = sum_k A[n,k] * B[k,m]."""
    shapes = {
        "input": Shape((n, k)),
        "weights": Shape((k, m)),
    }
    return build_fused_kernel([OpKind.MATMUL], shapes, name=name)


def build_fused_kernel(
    ops,
    shapes: Mapping[str, Shape],
    attrs: Mapping[str, int] | None = None,
    name: str | None = None,
) -> KernelSpec:
    """Build a kernel for a fused op sequence.

    Accepts OpKind values or tag strings. A leading Pad op is normalized
    into the conv padding attr and does not appear in the stored sequence;
    padding is realized as an explicit pre-computed buffer, so scheduled
    nests stay free of boundary conditionals.
    """
    ops = tuple(op if isinstance(op, OpKind) else OpKind.from_name(op) for op in ops)
    if not ops:
        raise KernelBuildError("op sequence must be non-empty")
    attrs = dict(attrs or {})

    if OpKind.PAD in ops:
        if ops[0] is not OpKind.PAD or ops.count(OpKind.PAD) > 1 or len(ops) < 2 or ops[1] is not OpKind.CONV2D:
            raise UnsupportedSequenceError("Pad is only supported directly before Conv2d")
        if attrs.get("pad", 0) < 1:
            raise KernelBuildError("explicit Pad op requires attrs['pad'] >= 1")
        ops = ops[1:]

    head, tail = ops[0], ops[1:]
    if head in (OpKind.MATMUL, OpKind.DENSE):
        builder = _build_gemm_like
    elif head is OpKind.CONV2D:
        builder = _build_conv
    elif head is OpKind.MAX_POOL2D:
        builder = _build_max_pool
    elif head is OpKind.GLOBAL_AVG_POOL2D:
        builder = _build_global_avg_pool
    elif head in _EPILOGUE_OPS:
        builder = _build_elementwise
    else:
        raise UnsupportedSequenceError(f"unsupported leading op {head.name}")
    if builder is not _build_elementwise:
        for op in tail:
            if op not in _EPILOGUE_OPS:
                raise UnsupportedSequenceError(
                    f"op {op.name} cannot be fused after {head.name}"
                )

    spec = builder(ops, shapes, attrs)
    if name is not None:
        spec = KernelSpec(name, spec.ops, spec.shapes, spec.attrs, spec.nest)
    return spec


def _require_role(shapes: Mapping[str, Shape], role: str, rank: int | None = None) -> Shape:
    if role not in shapes:
        raise KernelBuildError(f"missing required tensor role {role!r}")
    shape = shapes[role]
    if rank is not None and shape.rank != rank:
        raise KernelBuildError(f"role {role!r} must have rank {rank}, got {shape.dims}")
    return shape


def _check_output(shapes: Mapping[str, Shape], inferred: Shape) -> None:
    if "output" in shapes and shapes["output"] != inferred:
        raise KernelBuildError(
            f"declared output shape {shapes['output'].dims} does not match "
            f"inferred {inferred.dims}"
        )


def _epilogue_stmts(
    ops: tuple[OpKind, ...],
    shapes: Mapping[str, Shape],
    out_shape: Shape,
    out_axes: tuple[str, ...],
    channel_axis: str | None,
) -> tuple[list[Stmt], dict[str, Shape]]:
    """Statements for elementwise ops fused after a producing op."""
    target = _out_ref(out_axes)
    stmts: list[Stmt] = []
    extra: dict[str, Shape] = {}
    for op in ops:
        if op is OpKind.BIAS_ADD:
            if channel_axis is None:
                raise UnsupportedSequenceError("BiasAdd needs a channel dimension")
            bias = _require_role(shapes, "bias", rank=1)
            want = out_shape.dims[out_axes.index(channel_axis)]
            if bias.dims[0] != want:
                raise KernelBuildError(
                    f"bias length {bias.dims[0]} does not match channel extent {want}"
                )
            extra["bias"] = bias
            stmts.append(
                Stmt(target, Read(TensorRef("bias", (ix(channel_axis),))), ACCUMULATE)
            )
        elif op is OpKind.ELEM_ADD:
            res = _require_role(shapes, "residual")
            if res != out_shape:
                raise KernelBuildError(
                    f"residual shape {res.dims} does not match output {out_shape.dims}"
                )
            extra["residual"] = res
            stmts.append(
                Stmt(target, Read(TensorRef("residual", target.indices)), ACCUMULATE)
            )
        elif op is OpKind.RELU:
            stmts.append(Stmt(target, BinOp("max", Read(target), Const(0.0)), ASSIGN))
        else:  # pragma: no cover - guarded by build_fused_kernel
            raise UnsupportedSequenceError(f"op {op.name} is not an epilogue")
    return stmts, extra


def _build_gemm_like(ops, shapes, attrs) -> KernelSpec:
    head = ops[0]
    inp = _require_role(shapes, "input", rank=2)
    wgt = _require_role(shapes, "weights", rank=2)
    n, k = inp.dims
    if head is OpKind.MATMUL:
        if wgt.dims[0] != k:
            raise KernelBuildError(
                f"matmul weights {wgt.dims} incompatible with input {inp.dims}"
            )
        m = wgt.dims[1]
        b_ref = TensorRef("weights", (ix("K"), ix("M")))
    else:  # Dense stores weights as [out_features, in_features]
        if wgt.dims[1] != k:
            raise KernelBuildError(
                f"dense weights {wgt.dims} incompatible with input {inp.dims}"
            )
        m = wgt.dims[0]
        b_ref = TensorRef("weights", (ix("M"), ix("K")))
    out_shape = Shape((n, m))
    _check_output(shapes, out_shape)

    axes = (Axis("N", n, SPATIAL), Axis("M", m, SPATIAL), Axis("K", k, REDUCTION))
    target = _out_ref(("N", "M"))
    body = [
        Stmt(target, Const(0.0), INIT),
        Stmt(
            target,
            BinOp("mul", Read(TensorRef("input", (ix("N"), ix("K")))), Read(b_ref)),
            ACCUMULATE,
        ),
    ]
    epi, extra = _epilogue_stmts(ops[1:], shapes, out_shape, ("N", "M"), "M")
    body.extend(epi)

    all_shapes = {"input": inp, "weights": wgt, **extra, "output": out_shape}
    name = f"{class_id_of_ops(ops)}_{n}x{m}x{k}"
    return KernelSpec(name, ops, all_shapes, {}, LoopNest(axes, tuple(body)))


def _build_conv(ops, shapes, attrs) -> KernelSpec:
    inp = _require_role(shapes, "input", rank=4)
    wgt = _require_role(shapes, "weights", rank=4)
    n, ci, h, w = inp.dims
    co, wci, kh, kw = wgt.dims
    if wci != ci:
        raise KernelBuildError(
            f"conv weights {wgt.dims} expect {wci} input channels, input has {ci}"
        )
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("pad", 0))
    if stride < 1 or pad < 0:
        raise KernelBuildError(f"bad conv attrs stride={stride} pad={pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise KernelBuildError(
            f"conv window larger than input: input {inp.dims} weights {wgt.dims} "
            f"stride={stride} pad={pad}"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out_shape = Shape((n, co, oh, ow))
    _check_output(shapes, out_shape)

    axes = (
        Axis("N", n, SPATIAL),
        Axis("CO", co, SPATIAL),
        Axis("H", oh, SPATIAL),
        Axis("W", ow, SPATIAL),
        Axis("CI", ci, REDUCTION),
        Axis("KH", kh, REDUCTION),
        Axis("KW", kw, REDUCTION),
    )
    src = "padded" if pad else "input"
    x_ref = TensorRef(
        src,
        (ix("N"), ix("CI"), ix(("H", stride), "KH"), ix(("W", stride), "KW")),
    )
    w_ref = TensorRef("weights", (ix("CO"), ix("CI"), ix("KH"), ix("KW")))
    target = _out_ref(("N", "CO", "H", "W"))
    body = [
        Stmt(target, Const(0.0), INIT),
        Stmt(target, BinOp("mul", Read(x_ref), Read(w_ref)), ACCUMULATE),
    ]
    epi, extra = _epilogue_stmts(ops[1:], shapes, out_shape, ("N", "CO", "H", "W"), "CO")
    body.extend(epi)

    all_shapes = {"input": inp, "weights": wgt, **extra, "output": out_shape}
    all_attrs = {"stride": stride, "pad": pad}
    if pad:
        all_shapes["padded"] = Shape((n, ci, hp, wp))
    name = f"{class_id_of_ops(ops)}_{ci}x{h}x{w}_{co}x{kh}x{kw}_s{stride}"
    return KernelSpec(name, ops, all_shapes, all_attrs, LoopNest(axes, tuple(body)))


def _pool_geometry(inp: Shape, attrs) -> tuple[int, int, int, int, int]:
    ph = int(attrs.get("pool_h", attrs.get("pool", 2)))
    pw = int(attrs.get("pool_w", attrs.get("pool", ph)))
    stride = int(attrs.get("stride", ph))
    _, _, h, w = inp.dims
    if ph < 1 or pw < 1 or stride < 1 or h < ph or w < pw:
        raise KernelBuildError(
            f"bad pool geometry: input {inp.dims} pool {ph}x{pw} stride {stride}"
        )
    return ph, pw, stride, (h - ph) // stride + 1, (w - pw) // stride + 1


def _build_max_pool(ops, shapes, attrs) -> KernelSpec:
    if len(ops) != 1:
        raise UnsupportedSequenceError("max_pool2d does not take fused epilogues")
    inp = _require_role(shapes, "input", rank=4)
    ph, pw, stride, oh, ow = _pool_geometry(inp, attrs)
    n, c = inp.dims[:2]
    out_shape = Shape((n, c, oh, ow))
    _check_output(shapes, out_shape)

    axes = (
        Axis("N", n, SPATIAL),
        Axis("C", c, SPATIAL),
        Axis("H", oh, SPATIAL),
        Axis("W", ow, SPATIAL),
        Axis("KH", ph, REDUCTION),
        Axis("KW", pw, REDUCTION),
    )
    x_ref = TensorRef(
        "input", (ix("N"), ix("C"), ix(("H", stride), "KH"), ix(("W", stride), "KW"))
    )
    target = _out_ref(("N", "C", "H", "W"))
    body = (
        Stmt(target, Const(-math.inf), INIT),
        Stmt(target, Read(x_ref), ACCUMULATE, combine="max"),
    )
    all_attrs = {"pool_h": ph, "pool_w": pw, "stride": stride}
    name = f"max_pool2d_{c}x{inp.dims[2]}x{inp.dims[3]}_p{ph}x{pw}"
    return KernelSpec(
        name, ops, {"input": inp, "output": out_shape}, all_attrs, LoopNest(axes, body)
    )


def _build_global_avg_pool(ops, shapes, attrs) -> KernelSpec:
    if len(ops) != 1:
        raise UnsupportedSequenceError("global_avg_pool2d does not take fused epilogues")
    inp = _require_role(shapes, "input", rank=4)
    n, c, h, w = inp.dims
    out_shape = Shape((n, c))
    _check_output(shapes, out_shape)

    axes = (
        Axis("N", n, SPATIAL),
        Axis("C", c, SPATIAL),
        Axis("H", h, REDUCTION),
        Axis("W", w, REDUCTION),
    )
    target = _out_ref(("N", "C"))
    x_ref = TensorRef("input", (ix("N"), ix("C"), ix("H"), ix("W")))
    body = (
        Stmt(target, Const(0.0), INIT),
        Stmt(target, Read(x_ref), ACCUMULATE),
        Stmt(target, BinOp("mul", Read(target), Const(1.0 / (h * w))), ASSIGN),
    )
    name = f"global_avg_pool2d_{c}x{h}x{w}"
    return KernelSpec(name, ops, {"input": inp, "output": out_shape}, {}, LoopNest(axes, body))


def _build_elementwise(ops, shapes, attrs) -> KernelSpec:
    """Chains of ReLU / ElemAdd / BiasAdd with no producing op in front."""
    inp = _require_role(shapes, "input")
    out_shape = inp
    _check_output(shapes, out_shape)
    axis_names = tuple(f"X{i}" for i in range(inp.rank))
    axes = tuple(Axis(a, e, SPATIAL) for a, e in zip(axis_names, inp.dims))
    target = _out_ref(axis_names)
    # Channel dim for BiasAdd follows the NCHW / NC convention: dim 1.
    channel = axis_names[1] if inp.rank >= 2 else None
    body = [Stmt(target, Read(TensorRef("input", target.indices)), ASSIGN)]
    epi, extra = _epilogue_stmts(ops, shapes, out_shape, axis_names, channel)
    body.extend(epi)
    all_shapes = {"input": inp, **extra, "output": out_shape}
    name = f"{class_id_of_ops(ops)}_{'x'.join(map(str, inp.dims))}"
    return KernelSpec(name, tuple(ops), all_shapes, {}, LoopNest(axes, tuple(body)))


# ---------------------------------------------------------------------------
# Reference executor (correctness oracle)


def make_padded(spec: KernelSpec, inp: np.ndarray) -> np.ndarray:
    """Materialize the zero-padded input buffer (explicit, not guarded loads)."""
    pad = int(spec.attrs.get("pad", 0))
    padded = np.zeros(spec.shapes["padded"].dims, dtype=np.float64)
    padded[:, :, pad:-pad, pad:-pad] = inp
    return padded


def check_buffers(spec: KernelSpec, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Validate input buffers against the spec's shapes; returns float64 copies."""
    bufs: dict[str, np.ndarray] = {}
    for role in spec.input_roles():
        if role not in inputs:
            raise ValueError(f"missing input buffer for role {role!r}")
        arr = np.asarray(inputs[role], dtype=np.float64)
        want = spec.shapes[role].dims
        if arr.shape != want:
            raise ValueError(f"buffer {role!r} has shape {arr.shape}, expected {want}")
        bufs[role] = arr
    return bufs


def reference_execute(spec: KernelSpec, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Execute the canonical nest by direct interpretation.

    Statements run in body order; statements that reference reduction axes
    iterate those axes serially while the full spatial space is evaluated as
    one array operation. Output elements never written stay NaN so missing
    coverage cannot pass silently.
    """
    bufs = check_buffers(spec, inputs)
    if "padded" in spec.shapes:
        bufs["padded"] = make_padded(spec, bufs["input"])
    out = np.full(spec.shapes["output"].dims, np.nan, dtype=np.float64)
    bufs["output"] = out

    nest = spec.nest
    extents = {a.name: a.extent for a in nest.axes}
    reduction_names = [a.name for a in nest.axes if a.kind == REDUCTION]

    for stmt in nest.body:
        stmt_red = [r for r in reduction_names if r in stmt.axes()]
        if not stmt_red:
            _interpret_stmt(stmt, bufs, extents, {})
            continue
        for combo in itertools.product(*(range(extents[r]) for r in stmt_red)):
            _interpret_stmt(stmt, bufs, extents, dict(zip(stmt_red, combo)))
    return out


def _spatial_order(stmt: Stmt) -> list[str]:
    """Spatial axes of the statement target, in target dimension order."""
    order = []
    for idx in stmt.target.indices:
        for name, _ in idx.terms:
            if name not in order:
                order.append(name)
    return order


def _ref_view(
    ref: TensorRef,
    bufs: Mapping[str, np.ndarray],
    extents: Mapping[str, int],
    red_env: Mapping[str, int],
    order: list[str],
) -> np.ndarray | float:
    """View of a tensor over the statement's spatial grid.

    Each tensor dimension may vary over at most one spatial axis; reduction
    axes are fixed by ``red_env``. The result is aligned (via transpose and
    broadcast dims) to the target's spatial axis order.
    """
    buf = bufs[ref.role]
    index: list[object] = []
    dim_axes: list[str] = []
    for idx in ref.indices:
        start = idx.const
        spatial = None
        for name, coef in idx.terms:
            if name in red_env:
                start += coef * red_env[name]
            elif spatial is None:
                spatial = (name, coef)
            else:
                raise KernelBuildError(
                    f"dimension of {ref.role!r} varies over two spatial axes"
                )
        if spatial is None:
            index.append(start)
        else:
            name, coef = spatial
            stop = start + (extents[name] - 1) * coef + 1
            index.append(slice(start, stop, coef))
            dim_axes.append(name)
    view = buf[tuple(index)]
    if not dim_axes:
        return float(view)
    # Transpose into target order, then add broadcast dims for absent axes.
    want = [a for a in order if a in dim_axes]
    view = np.transpose(view, [dim_axes.index(a) for a in want])
    expand = tuple(slice(None) if a in dim_axes else np.newaxis for a in order)
    return view[expand]


def _eval_expr(expr, bufs, extents, red_env, order):
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Read):
        return _ref_view(expr.ref, bufs, extents, red_env, order)
    lhs = _eval_expr(expr.lhs, bufs, extents, red_env, order)
    rhs = _eval_expr(expr.rhs, bufs, extents, red_env, order)
    if expr.op == "add":
        return lhs + rhs
    if expr.op == "mul":
        return lhs * rhs
    return np.maximum(lhs, rhs)


def _interpret_stmt(stmt, bufs, extents, red_env):
    order = _spatial_order(stmt)
    value = _eval_expr(stmt.expr, bufs, extents, red_env, order)
    tv = _ref_view(stmt.target, bufs, extents, red_env, order)
    if not isinstance(tv, np.ndarray):  # rank-0 target (fully reduced)
        raise KernelBuildError("statement target has no spatial axes")
    if stmt.mode in (INIT, ASSIGN):
        tv[...] = value
    elif stmt.combine == "add":
        tv += value
    else:
        np.maximum(tv, value, out=tv)
