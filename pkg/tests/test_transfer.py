"""Selection heuristic, schedule compatibility, and transfer runs."""

import json
import math

import pytest

from schedlift.autoscheduler import TuningRecord
from schedlift.executor import DETERMINISTIC, MeasureProtocol, MeasuredCost, SearchTimeLedger
from schedlift.loopnest import Shape, build_fused_kernel, build_matmul, kernel_class_of, kernel_fingerprint
from schedlift.records import RecordStore, load_fixture_library, paper_fixtures_dir
from schedlift.schedule import Reorder, Schedule, Split, Vectorize, serialize, untuned_schedule
from schedlift.transfer import (
    ClassSummary,
    DescriptorError,
    ModelDescriptor,
    compatible_schedules,
    heuristic_score,
    measure_untuned,
    search_time_ledger,
    select_tuning_model,
    transfer_tune_kernel,
    transfer_tune_model,
)

DET = MeasureProtocol(warmup_runs=0, timed_runs=1, cost_mode=DETERMINISTIC)


def brute_force_scores(target_name: str) -> dict[str, float]:
    """Independent scoring straight from the fixture JSON files."""
    docs = {}
    for path in paper_fixtures_dir().glob("*.json"):
        doc = json.loads(path.read_text())
        if "class_proportions" in doc:
            docs[doc["name"]] = doc
    target = docs[target_name]
    out = {}
    for name, cand in docs.items():
        if name == target_name:
            continue
        score = 0.0
        for cls, entry in target["class_proportions"].items():
            if cls in cand["class_proportions"]:
                p = entry["percent"] / 100.0
                score += p * p * math.sqrt(cand["class_proportions"][cls]["kernels"])
        out[name] = score
    return out


@pytest.fixture(scope="module")
def library():
    return load_fixture_library()


class TestHeuristic:
    def test_matches_brute_force_everywhere(self, library):
        models = [m for m in library.values() if m.supplied_summary is not None]
        for target in models:
            expected = brute_force_scores(target.name)
            for cand in models:
                if cand.name == target.name:
                    continue
                got = heuristic_score(target, cand)
                assert abs(got.score - expected[cand.name]) < 1e-9

    def test_per_class_terms_resnet50_googlenet(self, library):
        s = heuristic_score(library["ResNet50"], library["GoogLeNet"])
        assert abs(s.per_class_terms["E"] - 0.67**2 * math.sqrt(49)) < 1e-12
        assert abs(s.per_class_terms["D"] - 0.06**2 * math.sqrt(1)) < 1e-12
        assert s.per_class_terms["B"] == 0.0

    def test_disjoint_class_sets_score_zero(self):
        a = ModelDescriptor(name="a", supplied_summary={"X": ClassSummary(2, 0.9)})
        b = ModelDescriptor(name="b", supplied_summary={"Y": ClassSummary(5, 0.8)})
        assert heuristic_score(a, b).score == 0.0

    def test_scale_invariance_of_derived_proportions(self):
        kernels = [
            (build_matmul(8, 8, 8, name="a"), 1),
            (build_matmul(16, 16, 16, name="b"), 2),
        ]
        costs = {"a": MeasuredCost.from_runs((1000,), 0), "b": MeasuredCost.from_runs((3000,), 0)}
        scaled = {k: MeasuredCost.from_runs((c.median_ns * 7,), 0) for k, c in costs.items()}
        m1 = ModelDescriptor(name="m", kernels=kernels, untuned_costs=costs)
        m2 = ModelDescriptor(name="m", kernels=kernels, untuned_costs=scaled)
        assert m1.class_summary() == m2.class_summary()

    def test_candidate_side_needs_no_costs(self, library):
        # A concrete-kernel model can be scored as a source without being
        # measured; only the target needs proportions.
        target = library["ResNet50"]
        r18 = library["ResNet18"]
        assert heuristic_score(target, r18).score == 0.0  # label vocabularies differ

    def test_rank_one_matches_published_choice(self, library):
        models = [m for m in library.values() if m.supplied_summary is not None]
        for target in models:
            ranked = select_tuning_model(target, models, top_k=1)
            assert ranked[0].candidate == target.tuning_model

    def test_tie_break_is_deterministic(self):
        t = ModelDescriptor(name="t", supplied_summary={"X": ClassSummary(1, 1.0)})
        a = ModelDescriptor(name="aaa", supplied_summary={"Y": ClassSummary(1, 0.5)})
        b = ModelDescriptor(name="bbb", supplied_summary={"Y": ClassSummary(3, 0.5)})
        c = ModelDescriptor(
            name="ccc", supplied_summary={"Y": ClassSummary(1, 0.5), "Z": ClassSummary(1, 0.0)}
        )
        ranked = select_tuning_model(t, [a, b, c, t], top_k=3)
        assert [r.candidate for r in ranked] == ["aaa", "bbb", "ccc"]
        assert all(r.score == 0.0 for r in ranked)

    def test_empty_library_rejected(self, library):
        with pytest.raises(ValueError):
            select_tuning_model(library["ResNet50"], [])


def _record(spec, schedule, cost_ns, source):
    return TuningRecord(
        kernel_name=spec.name,
        kernel_class=kernel_class_of(spec),
        kernel_shapes=dict(spec.shapes),
        kernel_attrs=dict(spec.attrs),
        schedule=schedule,
        cost=MeasuredCost.from_runs((cost_ns,), 0),
        source_model=source,
        timestamp=0.0,
        fingerprint=kernel_fingerprint(spec),
    )


def _conv_a(name, w=16):
    return build_fused_kernel(
        ["conv2d", "add"],
        {
            "input": Shape((1, 4, w, w)),
            "weights": Shape((8, 4, 1, 1)),
            "residual": Shape((1, 8, w // 2, w // 2)),
        },
        attrs={"stride": 2},
        name=name,
    )


def _conv_e(name, w=16, ci=4):
    return build_fused_kernel(
        ["conv2d", "bias", "relu"],
        {
            "input": Shape((1, ci, w, w)),
            "weights": Shape((8, ci, 3, 3)),
            "bias": Shape((8,)),
        },
        attrs={"pad": 1},
        name=name,
    )


def _e_schedule(co_factor, w_factor=None):
    prims = [Split("CO", co_factor)]
    order = ["N", "CO_o", "H", "CI", "KH", "KW", "CO_i", "W"]
    if w_factor:
        prims.append(Split("W", w_factor))
        order = ["N", "CO_o", "H", "W_o", "CI", "KH", "KW", "CO_i", "W_i"]
    prims.append(Reorder(tuple(order)))
    prims.append(Vectorize(order[-1]))
    return Schedule(tuple(prims), origin="conv2d_bias_relu")


@pytest.fixture
def seeded_store(tmp_path):
    """Store shaped like the worked example: 4 class-A records, 16 class-E,
    one each of pool/gap/dense classes, nothing for the add-variant class."""
    store = RecordStore(tmp_path / "db.jsonl")
    for i, f in enumerate((1, 2, 4, 8)):
        sched = Schedule(
            (Split("CO", f), Reorder(("N", "CO_o", "H", "CI", "KH", "KW", "CO_i", "W")), Vectorize("W")),
            origin="conv2d_add",
        )
        store.append(_record(_conv_a(f"a{i}"), sched, 1000 + i, "big"))
    e_factors = [(co, w) for co in (1, 2, 4, 8) for w in (None, 2, 4, 8)]
    for i, (co, w) in enumerate(e_factors):
        store.append(_record(_conv_e(f"e{i}"), _e_schedule(co, w), 2000 + i, "big"))
    pool = build_fused_kernel(["max_pool2d"], {"input": Shape((1, 2, 8, 8))}, {"pool": 2}, name="p0")
    gap = build_fused_kernel(["global_avg_pool2d"], {"input": Shape((1, 4, 6, 6))}, name="g0")
    dense = build_fused_kernel(
        ["dense", "add"],
        {"input": Shape((1, 8)), "weights": Shape((4, 8)), "residual": Shape((1, 4))},
        name="d0",
    )
    for spec in (pool, gap, dense):
        store.append(_record(spec, untuned_schedule(kernel_class_of(spec)), 500, "big"))
    return store


class TestCompatibility:
    def test_class_counts_match_worked_example(self, seeded_store):
        assert len(compatible_schedules(_conv_a("qa", w=8), seeded_store)) == 4
        assert len(compatible_schedules(_conv_e("qe", w=8, ci=8), seeded_store)) == 16
        f_kernel = build_fused_kernel(
            ["conv2d", "bias", "add", "relu"],
            {
                "input": Shape((1, 4, 8, 8)),
                "weights": Shape((8, 4, 3, 3)),
                "bias": Shape((8,)),
                "residual": Shape((1, 8, 8, 8)),
            },
            attrs={"pad": 1},
            name="qf",
        )
        assert compatible_schedules(f_kernel, seeded_store) == []

    def test_source_filter_and_pool(self, seeded_store):
        kernel = _conv_e("q", w=8, ci=8)
        assert len(compatible_schedules(kernel, seeded_store, sources=["other"])) == 0
        assert len(compatible_schedules(kernel, seeded_store, sources=["big"])) == 16
        assert len(compatible_schedules(kernel, seeded_store, sources=None)) == 16

    def test_duplicate_schedules_deduplicated_across_sources(self, seeded_store):
        dup = _e_schedule(2)
        seeded_store.append(_record(_conv_e("edup"), dup, 42, "other"))
        kernel = _conv_e("q", w=8, ci=8)
        texts = [serialize(r.schedule) for r in compatible_schedules(kernel, seeded_store)]
        assert len(texts) == len(set(texts)) == 16  # the duplicate collapsed


class TestTransferKernel:
    def test_invalid_candidates_are_data_not_failures(self, seeded_store):
        # Width 12 rejects transferred W-split factors of 8 but accepts 2, 4.
        kernel = _conv_e("q12", w=12, ci=8)
        result = transfer_tune_kernel(
            kernel, compatible_schedules(kernel, seeded_store), DET
        )
        assert result.invalid_count == 4  # four schedules carry Split(W, 8)
        assert len(result.outcomes) == 16
        for o in result.outcomes:
            assert o.cost.valid or o.error

    def test_empty_candidates_fall_back_to_untuned(self):
        kernel = _conv_e("solo")
        result = transfer_tune_kernel(kernel, [], DET)
        assert result.fallback and result.chosen_source == "untuned"
        assert result.chosen_cost.median_ns == result.baseline.median_ns

    def test_winner_is_min_over_valid_and_baseline(self, seeded_store):
        kernel = _conv_e("qw", w=16, ci=8)
        candidates = compatible_schedules(kernel, seeded_store)
        result = transfer_tune_kernel(kernel, candidates, DET)
        valid_costs = [o.cost.median_ns for o in result.outcomes if o.cost.valid]
        assert result.chosen_cost.median_ns == min(valid_costs + [result.baseline.median_ns])

    def test_cross_class_never_measured(self, seeded_store):
        kernel = _conv_e("qq", w=8, ci=8)
        records = compatible_schedules(kernel, seeded_store)
        assert all(r.kernel_class == "conv2d_bias_relu" for r in records)


def _tiny_target(name="tgt"):
    return ModelDescriptor(
        name=name,
        kernels=[
            (_conv_e("t_e", w=8, ci=8), 2),
            (_conv_a("t_a", w=8), 1),
            (
                build_fused_kernel(
                    ["max_pool2d"], {"input": Shape((1, 2, 8, 8))}, {"pool": 2}, name="t_p"
                ),
                1,
            ),
        ],
    )


class TestTransferModel:
    def test_speedup_at_least_one_in_deterministic_mode(self, seeded_store):
        report = transfer_tune_model(_tiny_target(), seeded_store, ["big"], DET)
        assert report.speedup >= 1.0
        assert len(report.per_kernel) == 3
        for res in report.per_kernel:
            assert res.chosen_cost.median_ns <= res.baseline.median_ns

    def test_pool_dominates_per_kernel(self, tmp_path, seeded_store):
        # A second source contributes a better class-E schedule; pool mode
        # must see it while the one-to-one run must not.
        better = _e_schedule(8, 4)
        extra = _record(_conv_e("ex"), better, 10, "small")
        # distinct primitives: reuse an existing text would collapse in dedupe
        reports = {}
        seeded_store.append(extra)
        target = _tiny_target()
        reports["oto"] = transfer_tune_model(target, seeded_store, ["big"], DET)
        reports["pool"] = transfer_tune_model(target, seeded_store, None, DET)
        for oto_row, pool_row in zip(reports["oto"].per_kernel, reports["pool"].per_kernel):
            assert pool_row.chosen_cost.median_ns <= oto_row.chosen_cost.median_ns
        assert reports["pool"].search_time_ns >= reports["oto"].search_time_ns

    def test_ledger_breakdown_localizes_extra_candidates(self, tmp_path, seeded_store):
        target = _tiny_target()
        before = transfer_tune_model(target, seeded_store, ["big"], DET)
        # Twice the class-A candidates: only the class-A kernel's line grows.
        for i, f in enumerate((1, 2, 4, 8)):
            sched = Schedule(
                (
                    Split("CO", f),
                    Split("CI", 2),
                    Reorder(("N", "CO_o", "H", "CI_o", "KH", "KW", "CI_i", "CO_i", "W")),
                    Vectorize("W"),
                ),
                origin="conv2d_add",
            )
            seeded_store.append(_record(_conv_a(f"a_more{i}"), sched, 900 + i, "big"))
        after = transfer_tune_model(target, seeded_store, ["big"], DET)
        b = search_time_ledger(before)["per_kernel_ns"]
        a = search_time_ledger(after)["per_kernel_ns"]
        assert a["t_a"] > b["t_a"]
        assert a["t_p"] == b["t_p"]

    def test_report_fields(self, seeded_store):
        report = transfer_tune_model(_tiny_target(), seeded_store, ["big"], DET)
        ledger = search_time_ledger(report)
        assert ledger["total_ns"] == report.search_time_ns
        assert set(ledger["per_kernel_ns"]) == {"t_e", "t_a", "t_p"}
        assert "conv2d_bias_relu" in ledger["per_class_ns"]


class TestDescriptors:
    def test_duplicate_kernel_rejected(self):
        k = build_matmul(4, 4, 4, name="same")
        with pytest.raises(DescriptorError):
            ModelDescriptor(name="dup", kernels=[(k, 1), (k, 1)])

    def test_proportions_over_budget_rejected(self):
        with pytest.raises(DescriptorError):
            ModelDescriptor(
                name="over",
                supplied_summary={"A": ClassSummary(1, 0.7), "B": ClassSummary(1, 0.5)},
            )

    def test_needs_kernels_or_summary(self):
        with pytest.raises(DescriptorError):
            ModelDescriptor(name="empty")

    def test_measure_untuned_enables_summary(self):
        model = ModelDescriptor(name="m", kernels=[(build_matmul(8, 8, 8, name="k"), 1)])
        measured = measure_untuned(model, DET, ledger=SearchTimeLedger())
        summary = measured.class_summary()
        assert summary["matmul"].kernels == 1
        assert abs(summary["matmul"].proportion - 1.0) < 1e-12
