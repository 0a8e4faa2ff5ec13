"""Replay planning and execution: partitioning, main-loop choice, workers."""

from __future__ import annotations

import fcntl
import json
import logging
import multiprocessing
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import kernels
from .errors import (
    CoverageError,
    MissingCheckpointError,
    NoLoopsError,
    ReplayPlanError,
    RunNotSealedError,
    UnknownProbeError,
)
from .execution import MODES, PSEUDORESUME, RESUME, EarlyStop, ExecutionContext, HindsightStatement
from .logs import LogSink, WorkerLog, coverage_gaps, merge_logs, read_log, write_log
from .policy import update_scaling_factor
from .runtime import BlockMode, SkipBlockRuntime
from .store import RunManifest, open_run, run_path
from .workload import ScriptWorkload, SyntheticWorkload, WorkloadSpec

logger = logging.getLogger(__name__)


def partition(epochs: int, workers: int) -> list[tuple[int, int]]:
    """Split ``[0, epochs)`` into ``workers`` contiguous ranges, larger first."""
    if epochs < 1 or workers < 1:
        raise ValueError("epochs and workers must be positive")
    base, extra = divmod(epochs, workers)
    ranges = []
    lo = 0
    for pid in range(workers):
        size = base + (1 if pid < extra else 0)
        ranges.append((lo, lo + size))
        lo += size
    return ranges


def select_main_loop(timings: Mapping[str, float], ordinals: Mapping[str, int] | None = None) -> str:
    """The loop with the largest cumulative time; ties go to the lower ordinal."""
    if not timings:
        raise NoLoopsError("no loops were recorded")
    ordinals = ordinals or {}
    return min(timings, key=lambda lid: (-timings[lid], ordinals.get(lid, 0), lid))


@dataclass
class ReplayPlan:
    run_id: str
    mode: str
    pid: int
    nparts: int
    epoch_range: tuple[int, int]
    epochs: int
    main_loop: str
    main_block: str | None
    probe: str | None = None
    probe_loop: str | None = None
    probe_blocks: frozenset[str] = frozenset()
    hindsight: tuple[HindsightStatement, ...] = ()
    skippable: frozenset[str] = frozenset()
    epoch_starts: dict[str, list[int]] = field(default_factory=dict)
    per_epoch_modes: dict[int, BlockMode] = field(default_factory=dict)

    def in_range(self, epoch: int) -> bool:
        lo, hi = self.epoch_range
        return lo <= epoch < hi

    def block_mode(self, block_id: str, epoch: int, has_entry: bool) -> BlockMode:
        if block_id in self.probe_blocks and self.in_range(epoch):
            return BlockMode.REPLAY_STEP
        if block_id not in self.skippable:
            return BlockMode.REPLAY_STEP
        return BlockMode.REPLAY_SKIP if has_entry else BlockMode.REPLAY_STEP

    def describe(self) -> dict:
        return {
            "run_id": self.run_id,
            "mode": self.mode,
            "pid": self.pid,
            "nparts": self.nparts,
            "epoch_range": list(self.epoch_range),
            "epochs": self.epochs,
            "main_loop": self.main_loop,
            "probe": self.probe,
            "probe_loop": self.probe_loop,
            "probe_blocks": sorted(self.probe_blocks),
            "hindsight": [h.to_text() for h in self.hindsight],
        }


def _resolve_probe(meta: dict, probe: str) -> str:
    loops = meta.get("loops", {})
    targets = meta.get("probe_targets", {})
    if probe in targets:
        return targets[probe]
    if probe in loops:
        return probe
    known = sorted(set(targets) | set(loops))
    raise UnknownProbeError(f"unknown probe {probe!r}; expected one of {known}")


def plan_replay(
    manifest: RunManifest,
    probe: str | None = None,
    mode: str = PSEUDORESUME,
    pid: int = 0,
    nparts: int = 1,
    hindsight: Iterable[str | HindsightStatement] = (),
) -> ReplayPlan:
    if not manifest.sealed:
        raise RunNotSealedError(f"run {manifest.run_id!r} is not sealed")
    if mode not in MODES:
        raise ReplayPlanError(f"mode must be one of {MODES}, not {mode!r}")
    if nparts < 1 or not 0 <= pid < nparts:
        raise ReplayPlanError(f"need 0 <= pid < nparts, got pid={pid} nparts={nparts}")
    meta = manifest.meta
    epochs = int(meta["epochs"])
    main_loop = meta["main_loop"]
    loops = meta.get("loops", {})
    statements = []
    for h in hindsight:
        try:
            statements.append(h if isinstance(h, HindsightStatement) else HindsightStatement.parse(h))
        except (ValueError, SyntaxError) as exc:
            raise ReplayPlanError(f"bad hindsight statement {h!r}: {exc}") from None
    if statements and probe is None:
        probe = "outer"
    probe_loop = _resolve_probe(meta, probe) if probe is not None else None
    probe_blocks = frozenset()
    if probe_loop is not None and loops.get(probe_loop, {}).get("block"):
        probe_blocks = frozenset({loops[probe_loop]["block"]})

    lo, hi = partition(epochs, nparts)[pid] if epochs >= 1 else (0, 0)
    main_block = loops.get(main_loop, {}).get("block")
    blocks = meta.get("blocks", {})
    if main_block is None:
        inner = [b for b, info in loops.items() if info.get("depth") == 1 and b in blocks]
        main_block = sorted(inner, key=lambda b: loops[b]["ordinal"])[0] if inner else None
    epoch_starts = {b: list(v) for b, v in meta.get("epoch_starts", {}).items()}
    if mode == RESUME:
        if meta.get("workload_kind") == "script":
            raise ReplayPlanError("script workloads replay with pseudoresume only")
        if lo > 0 and lo < hi:
            starts = epoch_starts.get(main_block) or list(range(epochs))
            needed = starts[lo] - 1
            refs = manifest.block_table.get(main_block, [])
            if not any(r.execution_index == needed for r in refs):
                raise MissingCheckpointError(
                    f"resume at epoch {lo} needs a checkpoint of {main_block} at index {needed}"
                )
    per_epoch = {e: BlockMode.REPLAY_SKIP if e < lo else BlockMode.REPLAY_STEP for e in range(hi)}
    if mode == RESUME:
        per_epoch = {e: BlockMode.REPLAY_STEP for e in range(lo, hi)}
    return ReplayPlan(
        run_id=manifest.run_id,
        mode=mode,
        pid=pid,
        nparts=nparts,
        epoch_range=(lo, hi),
        epochs=epochs,
        main_loop=main_loop,
        main_block=main_block,
        probe=probe,
        probe_loop=probe_loop,
        probe_blocks=probe_blocks,
        hindsight=tuple(statements),
        skippable=frozenset(b for b, names in blocks.items() if names is not None),
        epoch_starts=epoch_starts,
        per_epoch_modes=per_epoch,
    )


@dataclass
class ReplayResult:
    plan: ReplayPlan
    log: WorkerLog
    final_digest: str | None
    timing: dict
    log_path: str | None = None

    def to_json(self) -> dict:
        return {
            "plan": self.plan.describe(),
            "final_digest": self.final_digest,
            "timing": self.timing,
            "records": len(self.log.records),
            "log_path": self.log_path,
        }


def workload_from_meta(meta: dict):
    spec = WorkloadSpec.from_json(meta["workload"])
    if meta.get("workload_kind") == "script":
        return ScriptWorkload(spec)
    return SyntheticWorkload(spec, int(meta.get("work_units", 0)))


def execute_plan(plan: ReplayPlan, handle, log_path: str | os.PathLike | None = None) -> ReplayResult:
    """Run one worker's share of the replay against an open run."""
    meta = handle.manifest.meta
    workload = workload_from_meta(meta)
    sink = LogSink(plan.pid, plan.epoch_range)
    ctx: ExecutionContext | None = None

    def provider(block_id: str, index: int) -> BlockMode:
        return plan.block_mode(block_id, ctx.epoch, handle.has_checkpoint(block_id, index))

    kernels.warm_up()
    runtime = SkipBlockRuntime("replay", store=handle, mode_provider=provider)
    ctx = ExecutionContext(runtime, sink, plan=plan)
    t0 = time.perf_counter()
    digest = None
    completed = False
    try:
        ns = workload.run(ctx)
        digest = workload.state_digest(ns)
        completed = True
    except EarlyStop:
        pass
    wall = time.perf_counter() - t0
    stats = runtime.stats
    restore = sum(st.sum_R for st in stats.values())
    record_seconds = meta.get("record_seconds") or 0.0
    timing = {
        "wall_seconds": wall,
        "restore_seconds": restore + ctx.resume_seconds,
        "compute_seconds": max(0.0, wall - restore - ctx.resume_seconds),
        "skipped": sum(st.skipped for st in stats.values()),
        "stepped": sum(st.n for st in stats.values()),
        "completed": completed,
        "record_seconds": record_seconds,
        "speedup": record_seconds / wall if wall > 0 else None,
        "restore_pairs": _restore_pairs(meta, stats),
    }
    log_meta = {
        "run_id": plan.run_id,
        "pid": plan.pid,
        "nparts": plan.nparts,
        "epoch_range": list(plan.epoch_range),
        "epochs": plan.epochs,
        "mode": plan.mode,
        "probe": plan.probe,
        "hindsight": [h.to_text() for h in plan.hindsight],
    }
    records = sink.sorted_records()
    written = None
    if log_path is not None:
        written = str(write_log(log_path, records, log_meta))
    return ReplayResult(plan, WorkerLog(log_meta, records), digest, timing, written)


def _restore_pairs(meta: dict, stats) -> list[tuple[float, float]]:
    """Per block, (mean materialization, mean restore) for scaling-factor refinement."""
    pairs = []
    recorded = meta.get("stats", {})
    for block, st in stats.items():
        rec = recorded.get(block)
        if st.restores and rec and rec.get("k"):
            pairs.append((rec["sum_M"] / rec["k"], st.sum_R / st.restores))
    return pairs


def worker_log_path(directory, run_id: str, pid: int) -> Path:
    return run_path(directory, run_id) / "logs" / f"replay.p{pid}.log"


def replay_worker(
    directory,
    run_id: str,
    *,
    probe: str | None = None,
    mode: str = PSEUDORESUME,
    pid: int = 0,
    nparts: int = 1,
    hindsight: Sequence[str] = (),
    write: bool = True,
) -> ReplayResult:
    """Open the run read-only, plan this worker's share and execute it."""
    with open_run(directory, run_id, mode="replay") as handle:
        plan = plan_replay(handle.manifest, probe, mode, pid, nparts, hindsight)
        path = worker_log_path(directory, run_id, pid) if write else None
        result = execute_plan(plan, handle, path)
    if write:
        record_scaling(directory, result.timing["restore_pairs"])
    return result


def _worker_entry(args):
    directory, run_id, kwargs = args
    return replay_worker(directory, run_id, **kwargs)


def run_workers(
    directory,
    run_id: str,
    nparts: int,
    *,
    probe: str | None = None,
    mode: str = PSEUDORESUME,
    hindsight: Sequence[str] = (),
    write: bool = True,
    processes: int | None = None,
) -> tuple[list[ReplayResult], float]:
    """Launch ``nparts`` independent workers as processes; returns results and wall time."""
    jobs = [
        (directory, run_id, {"probe": probe, "mode": mode, "pid": pid, "nparts": nparts,
                             "hindsight": tuple(hindsight), "write": write})
        for pid in range(nparts)
    ]
    # plan errors surface here instead of inside a pool
    with open_run(directory, run_id, mode="replay") as handle:
        for pid in range(nparts):
            plan_replay(handle.manifest, probe, mode, pid, nparts, hindsight)
    t0 = time.perf_counter()
    if nparts == 1:
        results = [_worker_entry(jobs[0])]
    else:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes or nparts) as pool:
            results = pool.map(_worker_entry, jobs)
    return results, time.perf_counter() - t0


def merge_worker_logs(logs: Sequence[WorkerLog], epochs: int | None = None) -> WorkerLog:
    """Merge worker logs and insist that together they cover every epoch."""
    merged = merge_logs(logs)
    if epochs is None:
        epochs = max((lg.meta.get("epochs") or 0 for lg in logs), default=0)
    gaps = coverage_gaps(merged.meta["epoch_ranges"], epochs)
    if gaps:
        text = ", ".join(f"[{a},{b})" for a, b in gaps)
        raise CoverageError(f"worker logs do not cover epochs {text}")
    return merged


def read_worker_logs(paths: Iterable[str | os.PathLike]) -> list[WorkerLog]:
    return [read_log(p) for p in paths]


# -- scaling factor refinement ------------------------------------------------


def scaling_path(directory) -> Path:
    return Path(directory) / "scaling.json"


def record_scaling(directory, pairs: Iterable[tuple[float, float]]) -> float | None:
    """Append observed (materialize, restore) pairs and return the refined factor."""
    pairs = [p for p in pairs if p[0] > 0]
    if not pairs:
        return None
    path = scaling_path(directory)
    # parallel workers share the file, so the read-modify-write holds an exclusive lock
    with open(path.with_name(path.name + ".lock"), "a") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        observed = []
        if path.exists():
            try:
                observed = json.loads(path.read_text()).get("observed", [])
            except (OSError, ValueError):
                logger.warning("ignoring unreadable %s", path)
        observed.extend([list(p) for p in pairs])
        factor = update_scaling_factor([tuple(p) for p in observed])
        tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
        tmp.write_text(json.dumps({"observed": observed, "c": factor}))
        os.replace(tmp, path)
    return factor
