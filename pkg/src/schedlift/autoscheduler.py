"""Schedule search: produces tuned records that transfer can later reuse.

The search walks a per-class sketch grammar: multi-level tiling patterns
whose split factors come from the divisors of the live extents, plus the
five mutation moves (change a split factor, swap adjacent reorder entries,
toggle the unroll cap, toggle the cache write, move the parallel fuse
depth). Candidate generation is a pure function of the seed; measured
costs pick the winner but never steer generation, so the candidate
sequence is reproducible even when timings are not. The untuned baseline
always competes: a search can never return something slower than it.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .executor import (
    DET_ATTEMPT_NS,
    DETERMINISTIC,
    GLOBAL_LEDGER,
    LoweringError,
    MeasureProtocol,
    MeasuredCost,
    SearchTimeLedger,
    lower,
    measure,
    verify,
)
from .loopnest import KernelSpec, Shape, kernel_class_of, kernel_fingerprint
from .schedule import (
    CacheWrite,
    ComputeAt,
    Fuse,
    Parallel,
    Reorder,
    Schedule,
    ScheduleError,
    Split,
    Unroll,
    Vectorize,
    apply,
    serialize,
    split_names,
    untuned_schedule,
)

UNROLL_CHOICES = (0, 16, 64, 512)


@dataclass(frozen=True)
class SearchBudget:
    """How many schedule candidates to generate and from which seed."""

    max_candidates: int
    seed: int
    population: int = 32

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.max_candidates < self.population:
            raise ValueError("max_candidates must be at least the population size")

    @property
    def generations(self) -> int:
        return self.max_candidates // self.population


@dataclass(frozen=True)
class TuningRecord:
    """Persisted (kernel identity, schedule, measured cost) triple."""

    kernel_name: str
    kernel_class: str
    kernel_shapes: Mapping[str, Shape]
    kernel_attrs: Mapping[str, int]
    schedule: Schedule
    cost: MeasuredCost
    source_model: str
    timestamp: float
    fingerprint: str
    fallback: bool = False

    def __post_init__(self):
        if not self.cost.valid:
            raise ValueError("tuning records only persist valid costs")
        if self.schedule.origin != self.kernel_class:
            raise ValueError("schedule origin does not match the kernel class")


@dataclass(frozen=True)
class TraceEntry:
    schedule_text: str
    valid: bool
    median_ns: int | None
    error: str | None = None


@dataclass(frozen=True)
class SearchOutcome:
    record: TuningRecord
    trace: tuple[TraceEntry, ...]
    baseline: MeasuredCost
    fallback: bool


# --- candidate grammar -------------------------------------------------------


@dataclass(frozen=True)
class _Candidate:
    """A sketch instantiation; emission to primitives is deterministic."""

    splits: tuple[tuple[str, tuple[int, ...]], ...]  # (base axis, factor chain)
    order: tuple[str, ...]
    fuse_depth: int
    unroll: int
    cache_attach: str | None

    def emit(self, origin: str, note: str = "") -> Schedule:
        prims: list = []
        for axis, chain in self.splits:
            target = axis
            for f in chain:
                prims.append(Split(target, f))
                target, _ = split_names(target)
        prims.append(Reorder(self.order))
        if self.cache_attach is not None:
            prims.append(CacheWrite("output", "D"))
            prims.append(ComputeAt("D", self.cache_attach))
        par_axis = None
        if self.fuse_depth >= 2 and len(self.order) >= 2:
            prims.append(Fuse(self.order[0], self.order[1], "P"))
            par_axis = "P"
        elif self.fuse_depth == 1:
            par_axis = self.order[0]
        if par_axis is not None:
            prims.append(Parallel(par_axis))
        if self.unroll:
            prims.append(Unroll(self._unroll_axis(par_axis), self.unroll))
        prims.append(Vectorize(self.order[-1]))
        return Schedule(tuple(prims), origin=origin, origin_shape_note=note)

    def _unroll_axis(self, par_axis: str | None) -> str:
        # Aim below the outermost loop so the cap can actually expand loops.
        start = 2 if par_axis == "P" else 1
        if len(self.order) > start:
            return self.order[start]
        return par_axis or self.order[0]


def _chain_tokens(axis: str, levels: int) -> list[str]:
    """Axis names outer-to-inner after a split chain of the given length."""
    if levels == 0:
        return [axis]
    inners: list[str] = []
    name = axis
    for _ in range(levels):
        outer, inner = split_names(name)
        inners.append(inner)
        name = outer
    return [name] + list(reversed(inners))


def _proper_divisors(n: int) -> list[int]:
    divs = [d for d in range(1, n) if n % d == 0]
    return divs or [1]


def _pick_factor(rng: random.Random, extent: int, prefer_large: bool = False) -> int:
    pool = _proper_divisors(extent)
    if prefer_large:
        pool = pool[len(pool) // 2 :]
    return rng.choice(pool)


def _chain(rng: random.Random, extent: int, levels: int, prefer_large_first=False) -> tuple[int, ...]:
    """A split-factor chain whose product properly divides the extent.

    Sampling each factor from the proper divisors of the remaining quotient
    keeps every prefix valid on the live extent and keeps the whole chain
    replayable on any extent the product divides, which is what makes
    tuned factors reusable across power-of-two shape families.
    """
    factors = []
    quotient = extent
    for level in range(levels):
        f = _pick_factor(rng, quotient, prefer_large=(prefer_large_first and level == 0))
        factors.append(f)
        quotient //= f
    return tuple(factors)


def _chain_valid(extent: int, chain: tuple[int, ...]) -> bool:
    quotient = extent
    for f in chain:
        if f < 1 or quotient % f:
            return False
        quotient //= f
    return quotient >= 2 or extent == 1


def _family_of(class_id: str) -> str:
    if class_id.startswith("conv2d"):
        return "conv"
    if class_id == "matmul" or class_id.startswith(("matmul", "dense")):
        return "gemm"
    if class_id.startswith("max_pool2d"):
        return "pool"
    if class_id.startswith("global_avg_pool2d"):
        return "gap"
    return "elem"


def _extents(spec: KernelSpec) -> dict[str, int]:
    return {a.name: a.extent for a in spec.nest.axes}


def sketch(spec: KernelSpec, rng: random.Random) -> _Candidate:
    """Draw one initial candidate from the kernel's sketch family."""
    family = _family_of(kernel_class_of(spec))
    ext = _extents(spec)
    if family == "gemm":
        return _gemm_sketch(ext, rng)
    if family == "conv":
        return _conv_sketch(ext, rng)
    if family == "pool":
        return _pool_sketch(ext, rng)
    if family == "gap":
        return _gap_sketch(ext, rng)
    return _elem_sketch(spec, rng)


def _gemm_sketch(ext, rng: random.Random) -> _Candidate:
    variant = rng.choice(("kchunk", "kchunk", "tiled", "cache"))
    if variant == "kchunk":
        splits = [("K", (_pick_factor(rng, ext["K"]),))]
        n_tokens = ["N"]
        if rng.random() < 0.5 and ext["N"] > 1:
            splits.insert(0, ("N", (_pick_factor(rng, ext["N"]),)))
            n_tokens = ["N_o", "N_i"]
        order = tuple(n_tokens[:1] + ["K_o"] + n_tokens[1:] + ["K_i", "M"])
        return _Candidate(
            splits=tuple(splits),
            order=order,
            fuse_depth=rng.choice((0, 1)),
            unroll=rng.choice(UNROLL_CHOICES),
            cache_attach=None,
        )
    if variant == "tiled":
        levels_n = rng.choice((1, 2, 3))
        levels_m = rng.choice((1, 2, 3))
        n_chain = _chain(rng, ext["N"], levels_n)
        m_chain = _chain(rng, ext["M"], levels_m, prefer_large_first=True)
        k_chain = _chain(rng, ext["K"], 1)
        nt = _chain_tokens("N", levels_n)
        mt = _chain_tokens("M", levels_m)
        order = []
        pairs = max(len(nt), len(mt))
        for i in range(pairs):
            if i == min(2, pairs - 1):
                order.append("K_o")
            if i < len(nt):
                order.append(nt[i])
            if i < len(mt):
                order.append(mt[i])
        order.insert(len(order) - 1, "K_i")
        return _Candidate(
            splits=(("N", n_chain), ("M", m_chain), ("K", k_chain)),
            order=tuple(order),
            fuse_depth=rng.choice((0, 1, 2)),
            unroll=rng.choice(UNROLL_CHOICES),
            cache_attach=None,
        )
    # cache-blocked: outer (N_o, M_o) tiles, workspace attached at M_o
    n_f = _pick_factor(rng, ext["N"], prefer_large=True)
    m_f = _pick_factor(rng, ext["M"], prefer_large=True)
    k_f = _pick_factor(rng, ext["K"])
    order = ("N_o", "M_o", "K_o", "N_i", "K_i", "M_i")
    return _Candidate(
        splits=(("N", (n_f,)), ("M", (m_f,)), ("K", (k_f,))),
        order=order,
        fuse_depth=rng.choice((1, 2)),
        unroll=rng.choice(UNROLL_CHOICES),
        cache_attach="M_o",
    )


def _conv_sketch(ext, rng: random.Random) -> _Candidate:
    splits: list[tuple[str, tuple[int, ...]]] = []
    co_tokens, w_tokens, ci_tokens = ["CO"], ["W"], ["CI"]
    if rng.random() < 0.6 and ext["CO"] > 1:
        splits.append(("CO", (_pick_factor(rng, ext["CO"]),)))
        co_tokens = ["CO_o", "CO_i"]
    if rng.random() < 0.4 and ext["W"] > 1:
        splits.append(("W", (_pick_factor(rng, ext["W"], prefer_large=True),)))
        w_tokens = ["W_o", "W_i"]
    if rng.random() < 0.5 and ext["CI"] > 1:
        splits.append(("CI", (_pick_factor(rng, ext["CI"]),)))
        ci_tokens = ["CI_o", "CI_i"]
    variant = rng.choice(("wvec", "wvec", "covec"))
    if variant == "wvec":
        order = (
            ["N"]
            + co_tokens
            + ["H"]
            + w_tokens[:-1]
            + ci_tokens[:-1]
            + ["KH", "KW"]
            + ci_tokens[-1:]
            + w_tokens[-1:]
        )
    else:
        order = (
            ["N", "H"]
            + w_tokens
            + ci_tokens[:-1]
            + co_tokens[:-1]
            + ["KH", "KW"]
            + ci_tokens[-1:]
            + co_tokens[-1:]
        )
    return _Candidate(
        splits=tuple(splits),
        order=tuple(order),
        fuse_depth=rng.choice((0, 1, 2)),
        unroll=rng.choice(UNROLL_CHOICES),
        cache_attach=None,
    )


def _pool_sketch(ext, rng: random.Random) -> _Candidate:
    variant = rng.choice(("wlast", "plain"))
    if variant == "wlast":
        order = ("N", "C", "H", "KH", "KW", "W")
    else:
        order = ("N", "C", "H", "W", "KH", "KW")
    return _Candidate(
        splits=(),
        order=order,
        fuse_depth=rng.choice((0, 1)),
        unroll=rng.choice(UNROLL_CHOICES),
        cache_attach=None,
    )


def _gap_sketch(ext, rng: random.Random) -> _Candidate:
    order = rng.choice((("N", "C", "H", "W"), ("N", "C", "W", "H")))
    return _Candidate(
        splits=(),
        order=order,
        fuse_depth=rng.choice((0, 1)),
        unroll=rng.choice(UNROLL_CHOICES),
        cache_attach=None,
    )


def _elem_sketch(spec: KernelSpec, rng: random.Random) -> _Candidate:
    names = [a.name for a in spec.nest.axes]
    return _Candidate(
        splits=(),
        order=tuple(names),
        fuse_depth=rng.choice((0, 1)),
        unroll=rng.choice(UNROLL_CHOICES),
        cache_attach=None,
    )


def mutate(cand: _Candidate, spec: KernelSpec, rng: random.Random) -> _Candidate:
    """Apply one of the five grammar moves; may yield an invalid candidate."""
    ext = _extents(spec)
    moves = ["factor", "swap", "unroll", "cache", "fuse"]
    if not cand.splits:
        moves.remove("factor")
    move = rng.choice(moves)
    if move == "factor":
        idx = rng.randrange(len(cand.splits))
        axis, chain = cand.splits[idx]
        pos = rng.randrange(len(chain))
        for _ in range(8):
            new = list(chain)
            new[pos] = _pick_factor(rng, ext[axis])
            if tuple(new) != chain and _chain_valid(ext[axis], tuple(new)):
                splits = list(cand.splits)
                splits[idx] = (axis, tuple(new))
                return replace(cand, splits=tuple(splits))
        return cand
    if move == "swap":
        if len(cand.order) < 2:
            return cand
        i = rng.randrange(len(cand.order) - 1)
        order = list(cand.order)
        order[i], order[i + 1] = order[i + 1], order[i]
        return replace(cand, order=tuple(order))
    if move == "unroll":
        choices = [u for u in UNROLL_CHOICES if u != cand.unroll]
        return replace(cand, unroll=rng.choice(choices))
    if move == "cache":
        if cand.cache_attach is not None:
            return replace(cand, cache_attach=None)
        attach = cand.order[1] if len(cand.order) > 1 else cand.order[0]
        return replace(cand, cache_attach=attach)
    depth = rng.choice([d for d in (0, 1, 2) if d != cand.fuse_depth])
    return replace(cand, fuse_depth=depth)


# --- search ------------------------------------------------------------------


def search(
    spec: KernelSpec,
    budget: SearchBudget,
    protocol: MeasureProtocol | None = None,
    source_model: str = "",
    inputs: Mapping | None = None,
    ledger: SearchTimeLedger | None = None,
) -> SearchOutcome:
    """Search the grammar for the best schedule of one kernel.

    Candidate generation depends only on (spec, budget.seed); measured
    costs pick the winner. Invalid candidates are recorded in the trace and
    never abort the search.
    """
    import numpy as np

    protocol = protocol or MeasureProtocol()
    ledger = ledger if ledger is not None else GLOBAL_LEDGER
    rng = random.Random(budget.seed)
    class_id = kernel_class_of(spec)
    key = ("autotune", source_model or "-", spec.name)

    if inputs is None:
        data_rng = np.random.default_rng(budget.seed ^ 0x5EED)
        inputs = {
            role: data_rng.uniform(-1.0, 1.0, size=spec.shapes[role].dims)
            for role in spec.input_roles()
        }

    baseline_plan = lower_or_none(untuned_schedule(class_id), spec, ledger, key)
    if baseline_plan is None:  # pragma: no cover - canonical nests always lower
        raise LoweringError(f"untuned nest of {spec.name} failed to lower")
    baseline = measure(baseline_plan, inputs, protocol, key, ledger)

    # Pre-generate the whole candidate sequence from the seed alone.
    lineage = [sketch(spec, rng) for _ in range(budget.population)]
    candidates = list(lineage)
    while len(candidates) < budget.max_candidates:
        parent = candidates[rng.randrange(len(candidates))]
        candidates.append(mutate(parent, spec, rng))
    candidates = candidates[: budget.max_candidates]

    trace: list[TraceEntry] = []
    best: tuple[int, Schedule, MeasuredCost] | None = None
    seen: dict[str, MeasuredCost | None] = {}
    note = f"tuned on {spec.name}"
    for cand in candidates:
        sched = cand.emit(class_id, note)
        text = serialize(sched)
        if text in seen:
            prior = seen[text]
            trace.append(
                TraceEntry(text, prior is not None, prior.median_ns if prior else None)
            )
            continue
        t0 = time.perf_counter_ns()
        try:
            plan = lower(apply(sched, spec))
        except (ScheduleError, LoweringError) as exc:
            ledger.add(key, time.perf_counter_ns() - t0)
            seen[text] = None
            trace.append(TraceEntry(text, False, None, error=str(exc)))
            continue
        ledger.add(key, time.perf_counter_ns() - t0)
        cost = measure(plan, inputs, protocol, key, ledger)
        seen[text] = cost
        trace.append(TraceEntry(text, True, cost.median_ns))
        if best is None or cost.median_ns < best[2].median_ns:
            best = (len(trace) - 1, sched, cost)

    fallback = False
    if best is not None and best[2].median_ns < baseline.median_ns:
        winner_sched, winner_cost = best[1], best[2]
        check = verify(lower(apply(winner_sched, spec)), trials=1, seed=budget.seed)
        if not check.passed:  # pragma: no cover - guarded by the apply contract
            winner_sched, winner_cost, fallback = (
                untuned_schedule(class_id),
                baseline,
                True,
            )
    else:
        winner_sched, winner_cost, fallback = untuned_schedule(class_id), baseline, True

    record = TuningRecord(
        kernel_name=spec.name,
        kernel_class=class_id,
        kernel_shapes=dict(spec.shapes),
        kernel_attrs=dict(spec.attrs),
        schedule=winner_sched,
        cost=winner_cost,
        source_model=source_model,
        timestamp=0.0 if protocol.cost_mode == DETERMINISTIC else time.time(),
        fingerprint=kernel_fingerprint(spec),
        fallback=fallback,
    )
    return SearchOutcome(record, tuple(trace), baseline, fallback)


def lower_or_none(schedule, spec, ledger, key):
    t0 = time.perf_counter_ns()
    try:
        return lower(apply(schedule, spec))
    except (ScheduleError, LoweringError):
        return None
    finally:
        ledger.add(key, time.perf_counter_ns() - t0)


def tune_model(
    model,
    per_kernel_budget: SearchBudget,
    protocol: MeasureProtocol | None = None,
    ledger: SearchTimeLedger | None = None,
) -> list[TuningRecord]:
    """Auto-tune every unique kernel of a model once.

    ``model`` needs ``name`` and ``kernels`` (pairs of KernelSpec and use
    count); repeated kernels share one record. Per-kernel seeds derive from
    the budget seed and the kernel's position, so results are reproducible.
    """
    records: list[TuningRecord] = []
    seen: set[str] = set()
    for index, (spec, _use_count) in enumerate(model.kernels):
        fp = kernel_fingerprint(spec)
        if fp in seen:
            continue
        seen.add(fp)
        budget = replace(per_kernel_budget, seed=per_kernel_budget.seed + 1000 * index)
        outcome = search(
            spec, budget, protocol, source_model=model.name, ledger=ledger
        )
        records.append(outcome.record)
    return records
