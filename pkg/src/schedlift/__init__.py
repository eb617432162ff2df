"""schedlift: auto-scheduling and schedule reuse for small dense kernels."""

__version__ = "0.1.0"

from .autoscheduler import SearchBudget, SearchOutcome, TuningRecord, search, tune_model
from .executor import (
    ExecutablePlan,
    LoweringError,
    MeasureProtocol,
    MeasuredCost,
    SearchTimeLedger,
    execute,
    lower,
    measure,
    verify,
)
from .loopnest import (
    KernelBuildError,
    KernelSpec,
    OpKind,
    Shape,
    UnsupportedSequenceError,
    build_fused_kernel,
    build_matmul,
    kernel_class_of,
    kernel_fingerprint,
    reference_execute,
)
from .records import (
    RecordStore,
    load_descriptor,
    load_fixture_library,
    paper_fixtures_dir,
    render_report,
    save_descriptor,
)
from .schedule import (
    Schedule,
    ScheduleError,
    ScheduleParseError,
    ScheduledNest,
    apply,
    deserialize,
    serialize,
    untuned_schedule,
)
from .transfer import (
    DescriptorError,
    HeuristicScore,
    ModelDescriptor,
    TransferReport,
    compatible_schedules,
    heuristic_score,
    select_tuning_model,
    transfer_tune_kernel,
    transfer_tune_model,
)

__all__ = [name for name in dir() if not name.startswith("_")]
