"""Transfer of tuned schedules onto kernels they were not tuned for.

Given a target model and a library of tuned records, this module picks a
tuning source with the selection heuristic (the sum over shared kernel
classes of the squared untuned-cost proportion times the square root of
the source's kernel count in that class), replays every compatible
schedule onto each target kernel, measures the survivors standalone, and
composes the per-kernel winners into a full-program plan. Invalid replays
are data, not failures: they are recorded with an invalid cost and the
untuned baseline always competes, so per-kernel choices can never lose to
the default schedule. Pool mode widens the candidate set to every record
regardless of which model produced it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autoscheduler import TuningRecord
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
    resolve_thread_count,
    verify,
)
from .loopnest import KernelSpec, kernel_class_of, kernel_fingerprint
from .schedule import Schedule, ScheduleError, apply, serialize, untuned_schedule

PROPORTION_SLACK = 0.05


class DescriptorError(ValueError):
    """A model descriptor violates its invariants."""


@dataclass(frozen=True)
class ClassSummary:
    """Per-class summary: unique kernel count and untuned-time proportion."""

    kernels: int
    proportion: float


@dataclass
class ModelDescriptor:
    """A named set of kernels with use counts, plus class-level summaries.

    Proportions may be supplied directly (summary-only descriptors with no
    concrete kernels) or derived from measured untuned costs; both feed the
    same scoring code path.
    """

    name: str
    kernels: list[tuple[KernelSpec, int]] = field(default_factory=list)
    supplied_summary: dict[str, ClassSummary] | None = None
    untuned_costs: dict[str, MeasuredCost] | None = None
    label: str = ""
    tuning_model: str | None = None

    def __post_init__(self):
        if not self.kernels and self.supplied_summary is None:
            raise DescriptorError(
                f"model {self.name!r} has neither kernels nor class proportions"
            )
        for _, use in self.kernels:
            if use < 1:
                raise DescriptorError(f"model {self.name!r} has a non-positive use count")
        fingerprints = [kernel_fingerprint(spec) for spec, _ in self.kernels]
        if len(set(fingerprints)) != len(fingerprints):
            raise DescriptorError(f"model {self.name!r} lists a kernel twice")
        if self.supplied_summary is not None:
            self._check_proportions(self.supplied_summary)

    @staticmethod
    def _check_proportions(summary: Mapping[str, ClassSummary]) -> None:
        total = sum(s.proportion for s in summary.values())
        if total > 1.0 + PROPORTION_SLACK:
            raise DescriptorError(
                f"class proportions sum to {total:.3f}, beyond 1.0 + {PROPORTION_SLACK}"
            )
        for label, s in summary.items():
            if s.kernels < 1 or not (0.0 <= s.proportion <= 1.0):
                raise DescriptorError(f"bad class summary for {label!r}: {s}")

    def class_counts(self) -> dict[str, int]:
        """Unique kernels per class; derivable without any measurements."""
        if self.supplied_summary is not None:
            return {c: s.kernels for c, s in self.supplied_summary.items()}
        counts: dict[str, int] = {}
        for spec, _ in self.kernels:
            cls = kernel_class_of(spec)
            counts[cls] = counts.get(cls, 0) + 1
        return counts

    def class_summary(self) -> dict[str, ClassSummary]:
        if self.supplied_summary is not None:
            return dict(self.supplied_summary)
        if self.untuned_costs is None:
            raise DescriptorError(
                f"model {self.name!r} needs untuned costs to derive class proportions"
            )
        totals: dict[str, float] = {}
        counts: dict[str, int] = {}
        grand = 0.0
        for spec, use in self.kernels:
            cls = kernel_class_of(spec)
            cost = self.untuned_costs[spec.name]
            weighted = cost.median_ns * use
            totals[cls] = totals.get(cls, 0.0) + weighted
            counts[cls] = counts.get(cls, 0) + 1
            grand += weighted
        summary = {
            cls: ClassSummary(counts[cls], totals[cls] / grand if grand else 0.0)
            for cls in counts
        }
        self._check_proportions(summary)
        return summary


def measure_untuned(
    model: ModelDescriptor,
    protocol: MeasureProtocol | None = None,
    ledger: SearchTimeLedger | None = None,
) -> ModelDescriptor:
    """Return the descriptor with baseline costs measured for every kernel."""
    costs: dict[str, MeasuredCost] = {}
    for spec, _ in model.kernels:
        plan = lower(apply(untuned_schedule(kernel_class_of(spec)), spec))
        costs[spec.name] = measure(
            plan,
            _kernel_inputs(spec),
            protocol,
            ledger_key=("baseline", model.name, spec.name),
            ledger=ledger,
        )
    return replace(model, untuned_costs=costs)


@dataclass(frozen=True)
class HeuristicScore:
    """Eq-style source score: sum over shared classes of P^2 * sqrt(|W|)."""

    target: str
    candidate: str
    score: float
    per_class_terms: Mapping[str, float]
    shared_classes: int


def heuristic_score(target: ModelDescriptor, candidate: ModelDescriptor) -> HeuristicScore:
    """Score a candidate tuning source for a target model.

    Classes absent from the candidate contribute zero; each shared class c
    contributes P_c^2 * sqrt(|W_c|) with P_c the target's untuned-time
    proportion and |W_c| the candidate's unique kernel count. Only the
    target needs proportions; candidates are scored from counts alone.
    """
    t_summary = target.class_summary()
    c_counts = candidate.class_counts()
    terms: dict[str, float] = {}
    for cls, t in t_summary.items():
        if cls in c_counts:
            terms[cls] = (t.proportion**2) * math.sqrt(c_counts[cls])
    return HeuristicScore(
        target=target.name,
        candidate=candidate.name,
        score=sum(terms.values()),
        per_class_terms=terms,
        shared_classes=len(set(t_summary) & set(c_counts)),
    )


def select_tuning_model(
    target: ModelDescriptor,
    library: Sequence[ModelDescriptor],
    top_k: int = 1,
) -> list[HeuristicScore]:
    """Rank tuning sources for a target, best first.

    Ties break on more shared classes, then lexicographic model name, so
    rankings are deterministic.
    """
    if not library:
        raise ValueError("library of candidate models is empty")
    scored = [
        heuristic_score(target, cand) for cand in library if cand.name != target.name
    ]
    scored.sort(key=lambda s: (-s.score, -s.shared_classes, s.candidate))
    return scored[:top_k]


def compatible_schedules(
    kernel: KernelSpec,
    db,
    sources: Iterable[str] | None = None,
) -> list[TuningRecord]:
    """Records whose schedules can be replayed on this kernel.

    Exactly the records of the kernel's class, deduplicated by schedule
    text. ``sources=None`` is pool mode: every record qualifies no matter
    which model produced it.
    """
    source_set = None if sources is None else set(sources)
    out: list[TuningRecord] = []
    seen: set[str] = set()
    for record in db.query_class(kernel_class_of(kernel)):
        if source_set is not None and record.source_model not in source_set:
            continue
        text = serialize(record.schedule)
        if text in seen:
            continue
        seen.add(text)
        out.append(record)
    return out


@dataclass(frozen=True)
class CandidateOutcome:
    source_model: str
    source_kernel: str
    schedule_text: str
    cost: MeasuredCost
    error: str | None = None


@dataclass(frozen=True)
class KernelTransferResult:
    kernel_name: str
    kernel_class: str
    use_count: int
    baseline: MeasuredCost
    chosen_source: str
    chosen_schedule: Schedule
    chosen_cost: MeasuredCost
    outcomes: tuple[CandidateOutcome, ...]
    fallback: bool

    @property
    def invalid_count(self) -> int:
        return sum(1 for o in self.outcomes if not o.cost.valid)


def _kernel_inputs(spec: KernelSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(int(kernel_fingerprint(spec)[:12], 16))
    return {
        role: rng.uniform(-1.0, 1.0, size=spec.shapes[role].dims)
        for role in spec.input_roles()
    }


def transfer_tune_kernel(
    kernel: KernelSpec,
    candidates: Sequence[TuningRecord],
    protocol: MeasureProtocol | None = None,
    use_count: int = 1,
    ledger: SearchTimeLedger | None = None,
    target_name: str = "-",
) -> KernelTransferResult:
    """Try every candidate schedule on one kernel and keep the fastest.

    Invalid replays never abort the run; they are recorded with an invalid
    cost. The untuned baseline is measured first and wins all ties.
    """
    protocol = protocol or MeasureProtocol()
    ledger = ledger if ledger is not None else GLOBAL_LEDGER
    key = ("transfer", target_name, kernel.name)
    inputs = _kernel_inputs(kernel)
    class_id = kernel_class_of(kernel)

    baseline_sched = untuned_schedule(class_id)
    baseline = measure(
        lower(apply(baseline_sched, kernel)), inputs, protocol, key, ledger
    )
    chosen = (baseline_sched, baseline, "untuned")

    deterministic = protocol.cost_mode == DETERMINISTIC
    outcomes: list[CandidateOutcome] = []
    for record in candidates:
        text = serialize(record.schedule)
        t0 = time.perf_counter_ns()

        def attempt_ns():
            return DET_ATTEMPT_NS if deterministic else time.perf_counter_ns() - t0

        try:
            plan = lower(apply(record.schedule, kernel))
            check = verify(plan, trials=1, seed=7)
            if not check.passed:
                raise LoweringError(f"verification failed: {check.detail}")
        except (ScheduleError, LoweringError) as exc:
            ledger.add(key, attempt_ns())
            outcomes.append(
                CandidateOutcome(
                    record.source_model,
                    record.kernel_name,
                    text,
                    MeasuredCost.invalid(),
                    error=str(exc),
                )
            )
            continue
        ledger.add(key, attempt_ns())
        cost = measure(plan, inputs, protocol, key, ledger)
        outcomes.append(CandidateOutcome(record.source_model, record.kernel_name, text, cost))
        if cost.median_ns < chosen[1].median_ns:
            chosen = (record.schedule, cost, record.source_model)

    schedule, cost, source = chosen
    return KernelTransferResult(
        kernel_name=kernel.name,
        kernel_class=class_id,
        use_count=use_count,
        baseline=baseline,
        chosen_source=source,
        chosen_schedule=schedule,
        chosen_cost=cost,
        outcomes=tuple(outcomes),
        fallback=source == "untuned",
    )


@dataclass(frozen=True)
class TransferReport:
    """Outcome of transfer-tuning one model from a source (or the pool)."""

    target: str
    sources: tuple[str, ...] | None  # None means pool mode
    per_kernel: tuple[KernelTransferResult, ...]
    composed_cost: MeasuredCost
    untuned_cost: MeasuredCost
    speedup: float
    search_time_ns: int
    per_kernel_search_ns: Mapping[str, int]

    @property
    def pool_mode(self) -> bool:
        return self.sources is None


def _compose(
    rows: Sequence[tuple[KernelSpec, int, Schedule]],
    protocol: MeasureProtocol,
) -> MeasuredCost:
    """Measure the kernels run back to back in order, with multiplicity."""
    plans = [(lower(apply(sched, spec)), _kernel_inputs(spec), use) for spec, use, sched in rows]
    if protocol.cost_mode == DETERMINISTIC:
        total = sum(plan.det_cost_ns * use for plan, _, use in plans)
        return MeasuredCost.from_runs((total,) * protocol.timed_runs, 0)

    threads = resolve_thread_count(protocol)
    bound = [(plan, plan.bind(inputs), use) for plan, inputs, use in plans]

    def run_once():
        for plan, buffers, use in bound:
            for _ in range(use):
                plan.run(buffers, threads)

    started = time.perf_counter_ns()
    for _ in range(protocol.warmup_runs):
        run_once()
    runs = []
    for _ in range(protocol.timed_runs):
        t0 = time.perf_counter_ns()
        run_once()
        runs.append(time.perf_counter_ns() - t0)
    return MeasuredCost.from_runs(runs, time.perf_counter_ns() - started)


def transfer_tune_model(
    target: ModelDescriptor,
    db,
    sources: Iterable[str] | None,
    protocol: MeasureProtocol | None = None,
    ledger: SearchTimeLedger | None = None,
) -> TransferReport:
    """Transfer-tune every kernel of the target and compose the winners.

    The full-program cost runs the kernels in descriptor order with their
    use counts in one process; per-kernel standalone winners do not always
    compose into the best full program, which is exactly why the composed
    cost is measured rather than summed from standalone medians.
    """
    protocol = protocol or MeasureProtocol()
    sources = None if sources is None else tuple(sources)
    local = SearchTimeLedger()

    results: list[KernelTransferResult] = []
    for spec, use in target.kernels:
        candidates = compatible_schedules(spec, db, sources)
        results.append(
            transfer_tune_kernel(
                spec, candidates, protocol, use, local, target_name=target.name
            )
        )

    composed = _compose(
        [(spec, use, res.chosen_schedule) for (spec, use), res in zip(target.kernels, results)],
        protocol,
    )
    untuned = _compose(
        [
            (spec, use, untuned_schedule(kernel_class_of(spec)))
            for spec, use in target.kernels
        ],
        protocol,
    )

    per_kernel_ns: dict[str, int] = {}
    sink = ledger if ledger is not None else GLOBAL_LEDGER
    for key, ns in local.snapshot().items():
        per_kernel_ns[key[-1]] = per_kernel_ns.get(key[-1], 0) + ns
        sink.add(key, ns)

    return TransferReport(
        target=target.name,
        sources=sources,
        per_kernel=tuple(results),
        composed_cost=composed,
        untuned_cost=untuned,
        speedup=untuned.median_ns / composed.median_ns,
        search_time_ns=local.total_ns(),
        per_kernel_search_ns=per_kernel_ns,
    )


def search_time_ledger(report: TransferReport) -> dict:
    """Break the report's search time down per kernel and per class."""
    per_class: dict[str, int] = {}
    for res in report.per_kernel:
        ns = report.per_kernel_search_ns.get(res.kernel_name, 0)
        per_class[res.kernel_class] = per_class.get(res.kernel_class, 0) + ns
    return {
        "total_ns": report.search_time_ns,
        "per_kernel_ns": dict(report.per_kernel_search_ns),
        "per_class_ns": per_class,
    }
