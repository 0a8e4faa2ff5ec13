"""Record-replay engine for hindsight logging of epoch-structured training."""

from .execution import PSEUDORESUME, RESUME, ExecutionContext, HindsightStatement
from .logs import DiffReport, LogRecord, deferred_diff, merge_logs, read_log, write_log
from .policy import PolicyParams, joint_should_materialize
from .replay import ReplayPlan, execute_plan, partition, plan_replay, replay_worker, run_workers, select_main_loop
from .runtime import SideEffectSet, SkipBlockRuntime
from .store import open_run
from .workload import RecordReport, WorkloadSpec, record_run

__all__ = [
    "PSEUDORESUME",
    "RESUME",
    "DiffReport",
    "ExecutionContext",
    "HindsightStatement",
    "LogRecord",
    "PolicyParams",
    "RecordReport",
    "ReplayPlan",
    "SideEffectSet",
    "SkipBlockRuntime",
    "WorkloadSpec",
    "deferred_diff",
    "execute_plan",
    "joint_should_materialize",
    "merge_logs",
    "open_run",
    "partition",
    "plan_replay",
    "read_log",
    "record_run",
    "replay_worker",
    "run_workers",
    "select_main_loop",
    "write_log",
]
