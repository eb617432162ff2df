"""Hand-written reference schedules and small demo models.

The two GEMM schedules below are the classic shapes a CPU auto-scheduler
discovers for square matrix multiplies: a three-level register tiling with
a fused parallel outer loop, and a cache-blocked variant that accumulates
into a local write buffer. They double as fixtures: both replay on any
GEMM whose extents their factors divide.
"""

from __future__ import annotations

from .loopnest import Shape, build_fused_kernel
from .schedule import (
    CacheWrite,
    ComputeAt,
    Fuse,
    Parallel,
    Reorder,
    Schedule,
    Split,
    Unroll,
    Vectorize,
)
from .transfer import ModelDescriptor


def gemm_tiled_schedule() -> Schedule:
    """Three-level GEMM tiling, tuned on 512x512x512.

    Factors are stored relative (inner factor only), so the schedule stays
    valid on any GEMM whose extents the factors 8, 1, 16 divide.
    """
    return Schedule(
        primitives=(
            Split("N", 8),
            Split("N_o", 1),
            Split("N_oo", 16),
            Split("M", 8),
            Split("M_o", 1),
            Split("M_oo", 16),
            Split("K", 1),
            Reorder(
                ("N_ooo", "M_ooo", "N_ooi", "M_ooi", "K_o", "N_oi", "M_oi", "K_i", "N_i", "M_i")
            ),
            Fuse("N_ooo", "M_ooo", "F_NM"),
            Parallel("F_NM"),
            Unroll("F_NM", 512),
            Vectorize("M_i"),
        ),
        origin="matmul",
        origin_shape_note="tuned on matmul N=M=K=512",
    )


def gemm_cache_blocked_schedule() -> Schedule:
    """Cache-blocked GEMM with a local write buffer, tuned on 1024^3.

    The output is computed per (N_i x M_i) tile into a private buffer
    attached at the fused outer loop, then flushed to the output.
    """
    return Schedule(
        primitives=(
            Split("N", 32),
            Split("M", 256),
            Reorder(("N_o", "M_o", "N_i", "M_i")),
            CacheWrite("output", "D"),
            Split("N_i", 1),
            Split("N_io", 16),
            Split("N_ioo", 2),
            Split("M_i", 8),
            Split("M_io", 4),
            Split("M_ioo", 8),
            Split("K", 4),
            Reorder(
                (
                    "N_iooo",
                    "M_iooo",
                    "N_iooi",
                    "M_iooi",
                    "K_o",
                    "N_ioi",
                    "M_ioi",
                    "K_i",
                    "N_ii",
                    "M_ii",
                )
            ),
            ComputeAt("D", "M_o"),
            Fuse("N_o", "M_o", "F_NM"),
            Parallel("F_NM"),
            Unroll("F_NM", 64),
            Vectorize("M_ii"),
        ),
        origin="matmul",
        origin_shape_note="tuned on matmul N=M=K=1024",
    )


def _conv(name, inp, w, stride=1, pad=0, bias=False, residual=False, relu=False):
    ops = ["conv2d"]
    shapes = {"input": Shape(tuple(inp)), "weights": Shape(tuple(w))}
    co = w[0]
    oh = (inp[2] + 2 * pad - w[2]) // stride + 1
    ow = (inp[3] + 2 * pad - w[3]) // stride + 1
    if bias:
        ops.append("bias")
        shapes["bias"] = Shape((co,))
    if residual:
        ops.append("add")
        shapes["residual"] = Shape((1, co, oh, ow))
    if relu:
        ops.append("relu")
    return build_fused_kernel(ops, shapes, {"stride": stride, "pad": pad}, name=name)


def mini_source_model() -> ModelDescriptor:
    """Deeper of the two demo CNNs: the model worth auto-tuning once."""
    k = [
        (_conv("src_c1", [1, 8, 16, 16], [16, 8, 3, 3], pad=1, bias=True, relu=True), 2),
        (_conv("src_c2", [1, 16, 16, 16], [16, 16, 3, 3], pad=1, bias=True, relu=True), 2),
        (_conv("src_c3", [1, 16, 16, 16], [32, 16, 3, 3], stride=2, pad=1, bias=True, relu=True), 1),
        (_conv("src_d1", [1, 16, 16, 16], [32, 16, 1, 1], stride=2, residual=True), 1),
        (_conv("src_c4", [1, 32, 8, 8], [32, 32, 3, 3], pad=1, bias=True, relu=True), 2),
        (
            build_fused_kernel(
                ["max_pool2d"], {"input": Shape((1, 16, 16, 16))}, {"pool": 2}, name="src_p1"
            ),
            1,
        ),
        (
            build_fused_kernel(
                ["global_avg_pool2d"], {"input": Shape((1, 32, 8, 8))}, name="src_g1"
            ),
            1,
        ),
        (
            build_fused_kernel(
                ["dense", "add"],
                {
                    "input": Shape((1, 32)),
                    "weights": Shape((10, 32)),
                    "residual": Shape((1, 10)),
                },
                name="src_f1",
            ),
            1,
        ),
    ]
    return ModelDescriptor(name="mini-deep", kernels=k)


def mini_target_model() -> ModelDescriptor:
    """Shallower demo CNN at different shapes; one class the source lacks."""
    k = [
        (_conv("tgt_c1", [1, 8, 12, 12], [16, 8, 3, 3], pad=1, bias=True, relu=True), 2),
        (_conv("tgt_c2", [1, 16, 12, 12], [16, 16, 3, 3], pad=1, bias=True, relu=True), 2),
        (_conv("tgt_d1", [1, 16, 12, 12], [32, 16, 1, 1], stride=2, residual=True), 1),
        (
            _conv(
                "tgt_b1",
                [1, 16, 12, 12],
                [16, 16, 3, 3],
                pad=1,
                bias=True,
                residual=True,
                relu=True,
            ),
            1,
        ),
        (
            build_fused_kernel(
                ["max_pool2d"], {"input": Shape((1, 16, 12, 12))}, {"pool": 2}, name="tgt_p1"
            ),
            1,
        ),
        (
            build_fused_kernel(
                ["global_avg_pool2d"], {"input": Shape((1, 32, 6, 6))}, name="tgt_g1"
            ),
            1,
        ),
        (
            build_fused_kernel(
                ["dense", "add"],
                {
                    "input": Shape((1, 32)),
                    "weights": Shape((10, 32)),
                    "residual": Shape((1, 10)),
                },
                name="tgt_f1",
            ),
            1,
        ),
    ]
    return ModelDescriptor(name="mini-shallow", kernels=k)
