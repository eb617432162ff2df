"""Schedule application: splits, reorders, fuses, cache writes, errors."""

import dataclasses

import pytest

from schedlift.loopnest import Shape, build_fused_kernel, build_matmul
from schedlift.presets import gemm_cache_blocked_schedule, gemm_tiled_schedule
from schedlift.schedule import (
    FACTOR_EXCEEDS_EXTENT,
    INVALID_COMPUTE_AT,
    INVALID_FUSE,
    NON_DIVISIBLE_SPLIT,
    STRUCTURAL_MISMATCH,
    UNKNOWN_AXIS,
    CacheWrite,
    ComputeAt,
    Fuse,
    Parallel,
    Reorder,
    Schedule,
    ScheduleError,
    ScheduleParseError,
    Split,
    Unroll,
    Vectorize,
    apply,
    deserialize,
    serialize,
    untuned_schedule,
)


def sched(*prims, origin="matmul"):
    return Schedule(primitives=tuple(prims), origin=origin)


def axis_names(nest):
    return [a.name for a in nest.axes]


class TestSplit:
    def test_split_recomputes_outer_from_live_extent(self):
        nest = apply(sched(Split("N", 8)), build_matmul(512, 4, 4))
        n_o = nest.axes[nest.position("N_o")]
        n_i = nest.axes[nest.position("N_i")]
        assert (n_o.extent, n_i.extent) == (64, 8)

    def test_factor_exceeding_extent(self):
        with pytest.raises(ScheduleError) as err:
            apply(sched(Split("N", 256)), build_matmul(128, 4, 4))
        assert err.value.kind == FACTOR_EXCEEDS_EXTENT

    def test_non_divisible_factor(self):
        with pytest.raises(ScheduleError) as err:
            apply(sched(Split("N", 3)), build_matmul(128, 4, 4))
        assert err.value.kind == NON_DIVISIBLE_SPLIT

    def test_consumed_axis_is_unknown(self):
        with pytest.raises(ScheduleError) as err:
            apply(sched(Split("N", 4), Split("N", 2)), build_matmul(16, 4, 4))
        assert err.value.kind == UNKNOWN_AXIS

    def test_split_chain_naming(self):
        nest = apply(
            sched(Split("N", 4), Split("N_o", 2), Split("N_i", 2)),
            build_matmul(32, 4, 4),
        )
        assert axis_names(nest)[:4] == ["N_oo", "N_oi", "N_io", "N_ii"]


class TestReorderFuse:
    def test_reorder_permutes_listed_axes_in_place(self):
        nest = apply(sched(Reorder(("K", "N"))), build_matmul(4, 5, 6))
        assert axis_names(nest) == ["K", "M", "N"]

    def test_fuse_requires_adjacency(self):
        with pytest.raises(ScheduleError) as err:
            apply(sched(Fuse("N", "K", "F")), build_matmul(4, 5, 6))
        assert err.value.kind == INVALID_FUSE

    def test_fuse_combines_extents(self):
        nest = apply(sched(Fuse("N", "M", "F")), build_matmul(4, 5, 6))
        assert nest.axes[0].name == "F" and nest.axes[0].extent == 20

    def test_unknown_axis_in_reorder(self):
        with pytest.raises(ScheduleError) as err:
            apply(sched(Reorder(("N", "Q"))), build_matmul(4, 5, 6))
        assert err.value.kind == UNKNOWN_AXIS


class TestStructure:
    def test_cross_class_application_mismatches(self):
        dense = build_fused_kernel(
            ["dense", "add"],
            {"input": Shape((1, 8)), "weights": Shape((4, 8)), "residual": Shape((1, 4))},
        )
        conv_sched = Schedule(primitives=(Split("CO", 2),), origin="conv2d_bias_relu")
        with pytest.raises(ScheduleError) as err:
            apply(conv_sched, dense)
        assert err.value.kind == STRUCTURAL_MISMATCH

    def test_vectorize_must_be_innermost(self):
        with pytest.raises(ScheduleError) as err:
            apply(sched(Vectorize("N")), build_matmul(4, 5, 6))
        assert err.value.kind == STRUCTURAL_MISMATCH

    def test_vectorize_innermost_accepted(self):
        nest = apply(sched(Vectorize("K")), build_matmul(4, 5, 6))
        assert nest.annotations["K"] == {"vectorize": 1}

    def test_compute_at_requires_cache_write(self):
        with pytest.raises(ScheduleError) as err:
            apply(sched(ComputeAt("D", "N")), build_matmul(4, 5, 6))
        assert err.value.kind == INVALID_COMPUTE_AT

    def test_cache_write_needs_attachment(self):
        with pytest.raises(ScheduleError) as err:
            apply(sched(CacheWrite("output", "D")), build_matmul(4, 5, 6))
        assert err.value.kind == INVALID_COMPUTE_AT

    def test_reduction_outside_attach_rejected(self):
        prims = (
            CacheWrite("output", "D"),
            Reorder(("K", "N", "M")),
            ComputeAt("D", "N"),
        )
        with pytest.raises(ScheduleError) as err:
            apply(sched(*prims), build_matmul(4, 5, 6))
        assert err.value.kind == INVALID_COMPUTE_AT

    def test_attach_on_reduction_axis_rejected(self):
        prims = (CacheWrite("output", "D"), ComputeAt("D", "K"))
        with pytest.raises(ScheduleError) as err:
            apply(sched(*prims), build_matmul(4, 5, 6))
        assert err.value.kind == INVALID_COMPUTE_AT


class TestReferenceSchedules:
    @pytest.mark.parametrize("n", [512, 1024])
    def test_tiled_schedule_applies_across_sizes(self, n):
        nest = apply(gemm_tiled_schedule(), build_matmul(n, n, n))
        assert nest.axes[0].name == "F_NM"
        assert nest.annotations["F_NM"]["parallel"] == 1
        assert nest.axes[-1].name == "M_i" and nest.axes[-1].extent == 8

    def test_cache_blocked_schedule_workspace(self):
        nest = apply(gemm_cache_blocked_schedule(), build_matmul(1024, 1024, 1024))
        assert nest.cache_buffers == (("D", "F_NM"),)
        assert nest.axes[-1].name == "M_ii" and nest.axes[-1].extent == 8

    @pytest.mark.parametrize("schedule", [gemm_tiled_schedule(), gemm_cache_blocked_schedule()])
    def test_coverage_is_exact(self, schedule):
        spec = build_matmul(1024, 1024, 1024)
        nest = apply(schedule, spec)
        assert nest.coverage_products() == {"N": 1024, "M": 1024, "K": 1024}

    def test_tiled_schedule_on_non_multiple_size_fails_loudly(self):
        # 8 divides 100 is false only for the 16 factor chain; 100/8 then /1
        # then /16 fails because 16 does not divide 12.5 -> non-divisible.
        with pytest.raises(ScheduleError):
            apply(gemm_tiled_schedule(), build_matmul(100, 100, 100))


class TestPersistence:
    @pytest.mark.parametrize(
        "schedule",
        [
            gemm_tiled_schedule(),
            gemm_cache_blocked_schedule(),
            untuned_schedule("matmul"),
        ],
    )
    def test_round_trip_identity(self, schedule):
        assert deserialize(serialize(schedule)) == schedule

    def test_round_trip_preserves_primitive_order(self):
        schedule = gemm_cache_blocked_schedule()
        again = deserialize(serialize(schedule))
        assert [type(p).__name__ for p in again.primitives] == [
            type(p).__name__ for p in schedule.primitives
        ]

    def test_corrupted_field_name_is_a_parse_error(self):
        text = serialize(gemm_tiled_schedule()).replace("inner_factor", "inner_factur")
        with pytest.raises(ScheduleParseError):
            deserialize(text)

    def test_unknown_op_is_a_parse_error(self):
        with pytest.raises(ScheduleParseError) as err:
            deserialize('{"origin_class":"matmul","primitives":[{"op":"tile","axis":"N"}]}')
        assert "primitives[0]" in str(err.value)

    def test_invalid_json_reports_position(self):
        with pytest.raises(ScheduleParseError) as err:
            deserialize('{"origin_class": "matmul", "primitives": [}')
        assert "position" in str(err.value)

    def test_empty_schedule_round_trips(self):
        s = untuned_schedule("conv2d_add")
        assert deserialize(serialize(s)).primitives == ()


class TestAnnotationBookkeeping:
    def test_annotations_follow_fused_axis(self):
        prims = (Parallel("N"), Fuse("N", "M", "F"))
        nest = apply(sched(*prims), build_matmul(4, 5, 6))
        assert nest.annotations["F"]["parallel"] == 1

    def test_duplicate_annotation_rejected(self):
        with pytest.raises(ScheduleError) as err:
            apply(sched(Parallel("N"), Parallel("N")), build_matmul(4, 5, 6))
        assert err.value.kind == STRUCTURAL_MISMATCH

    def test_unroll_recorded_with_max(self):
        nest = apply(sched(Unroll("N", 16)), build_matmul(4, 5, 6))
        assert nest.annotations["N"] == {"unroll": 16}

    def test_schedules_are_frozen(self):
        with pytest.raises(dataclasses.FrozenInstanceError):
            gemm_tiled_schedule().origin = "other"
