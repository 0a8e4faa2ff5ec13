"""SkipBlock runtime: execute-or-restore decisions, timing and memoization.

Typical use inside a workload::

    effects = SideEffectSet(namespace, ["model", "optimizer"])
    for _ in runtime.skip_block("train:L1", effects):
        ...  # body runs only when the runtime decides to execute

On record every block executes; after the body the adaptive rule decides
whether its declared side-effects are materialized.  On replay a block is
skipped when the plan allows it, in which case the declared slots are
overwritten from the store and the body never runs.
"""

from __future__ import annotations

import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Iterator, MutableMapping

import numpy as np

from . import codec
from .codec import Kind, ValueRecord
from .errors import (
    MissingCheckpointError,
    NestingViolationError,
    SlotMismatchError,
)
from .materializer import BackgroundMaterializer, SnapshotBatch, WriteReport
from .policy import PolicyParams, joint_should_materialize

logger = logging.getLogger(__name__)

# reserved slot holding log lines emitted while the block executed
LOG_SLOT = "__logs__"

POLICIES = ("adaptive", "always", "never")


class BlockMode(str, Enum):
    RECORD_EXECUTE = "RecordExecute"
    REPLAY_SKIP = "ReplaySkip"
    REPLAY_STEP = "ReplayStep"


class Decision(str, Enum):
    EXECUTE = "Execute"
    SKIP = "Skip"


class SideEffectSet:
    """Named slots of a namespace that a block may change.

    Restoring a slot loads state in place when the live value supports it
    (``load_state_dict`` objects, same-shaped arrays) so that references
    held elsewhere keep seeing the restored state; otherwise the name is
    rebound.
    """

    def __init__(self, namespace: MutableMapping[str, Any], names: Iterable[str]):
        names = list(names)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate slot names in {names}")
        if LOG_SLOT in names:
            raise ValueError(f"{LOG_SLOT!r} is reserved")
        self.namespace = namespace
        self.names = tuple(names)

    def __len__(self) -> int:
        return len(self.names)

    def items(self) -> list[tuple[str, Any]]:
        missing = [n for n in self.names if n not in self.namespace]
        if missing:
            raise SlotMismatchError(f"declared slots not bound: {missing}")
        return [(n, self.namespace[n]) for n in self.names]

    def apply(self, name: str, value: Any) -> None:
        live = self.namespace.get(name)
        loader = getattr(live, "load_state_dict", None)
        if callable(loader) and isinstance(value, dict):
            loader(value)
        elif (
            isinstance(live, np.ndarray)
            and isinstance(value, np.ndarray)
            and live.shape == value.shape
            and live.dtype == value.dtype
            and live.flags.writeable
        ):
            live[...] = value
        else:
            self.namespace[name] = value


@dataclass
class BlockStats:
    block_id: str
    sum_M: float = 0.0
    sum_C: float = 0.0
    sum_R: float = 0.0
    n: int = 0
    k: int = 0
    # breakdown of sum_M and extra reporting-only measurements
    sum_M_critical: float = 0.0
    sum_M_background: float = 0.0
    sum_M_background_cpu: float = 0.0
    calibration: float | None = None
    restores: int = 0
    skipped: int = 0
    checkpoint_indices: list[int] = field(default_factory=list)
    _completed_costs: list[float] = field(default_factory=list, repr=False)
    _pending_costs: dict[int, float] = field(default_factory=dict, repr=False)

    @property
    def mean_C(self) -> float:
        return self.sum_C / self.n if self.n else 0.0

    @property
    def mean_M(self) -> float:
        return self.sum_M / self.k if self.k else 0.0

    @property
    def mean_R(self) -> float:
        return self.sum_R / self.restores if self.restores else 0.0

    def projected_cost(self) -> float | None:
        if self._completed_costs:
            return sum(self._completed_costs) / len(self._completed_costs)
        return self.calibration

    def to_dict(self) -> dict:
        return {
            "block_id": self.block_id,
            "sum_M": self.sum_M,
            "sum_C": self.sum_C,
            "sum_R": self.sum_R,
            "n": self.n,
            "k": self.k,
            "mean_C": self.mean_C,
            "mean_M": self.mean_M,
            "sum_M_critical": self.sum_M_critical,
            "sum_M_background": self.sum_M_background,
            "sum_M_background_cpu": self.sum_M_background_cpu,
            "calibration": self.calibration,
            "restores": self.restores,
            "skipped": self.skipped,
            "checkpoint_indices": list(self.checkpoint_indices),
        }


@dataclass
class _Frame:
    block_id: str
    index: int
    started: float
    captured: list[str] | None


_SERIALIZE_RATE: float | None = None


def serialize_seconds_per_byte() -> float:
    """Per-byte cost of the writer pipeline after capture, measured once per process.

    The probe goes through the same steps as a real checkpoint: a nested
    map record, entry framing, digest and an fsync'd append.
    """
    global _SERIALIZE_RATE
    if _SERIALIZE_RATE is None:
        probe = {"w": np.random.default_rng(0).standard_normal(1 << 19), "steps": 1}
        nbytes = probe["w"].nbytes
        best = float("inf")
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "probe.seg")
            for _ in range(3):
                t0 = time.perf_counter()
                payload = codec.encode_entry("probe", 0, [codec.to_record("x", probe)])
                dig = codec.digest(payload)
                with open(path, "ab") as fh:
                    fh.write(dig)
                    fh.write(payload)
                    fh.flush()
                    os.fsync(fh.fileno())
                best = min(best, time.perf_counter() - t0)
        _SERIALIZE_RATE = best / nbytes
    return _SERIALIZE_RATE


def _default_charge_background() -> bool:
    # writer threads only run for free when they have a core of their own
    return (os.cpu_count() or 1) < 2


class SkipBlockRuntime:
    """Per-execution SkipBlock state.

    ``phase`` is ``"record"`` or ``"replay"``.  During replay
    ``mode_provider(block_id, execution_index)`` supplies the block mode; by
    default a block is skipped whenever the store holds its entry.

    ``policy`` selects the record-time rule: ``"adaptive"`` (the joint
    invariant), ``"always"`` or ``"never"``.  ``charge_background`` decides
    whether writer-thread CPU time counts toward the materialization cost the
    rule sees; ``None`` picks it from the core count.
    """

    def __init__(
        self,
        phase: str,
        *,
        store=None,
        params: PolicyParams | None = None,
        materializer: BackgroundMaterializer | None = None,
        policy: str = "adaptive",
        charge_background: bool | None = None,
        mode_provider: Callable[[str, int], BlockMode] | None = None,
        clock: Callable[[], float] = time.perf_counter,
    ):
        if phase not in ("record", "replay"):
            raise ValueError(f"phase must be 'record' or 'replay', not {phase!r}")
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, not {policy!r}")
        self.phase = phase
        self.store = store
        self.params = params or PolicyParams()
        self.materializer = materializer
        self.policy = policy
        if charge_background is None:
            charge_background = _default_charge_background()
        background = materializer is not None and materializer.background
        self.charge_background = bool(charge_background and background)
        self.mode_provider = mode_provider
        self.clock = clock
        self.stats: dict[str, BlockStats] = {}
        self.modes_seen: list[tuple[str, int, BlockMode]] = []
        self.on_restored_logs: Callable[[str, int, str], None] | None = None
        self._exec_index: dict[str, int] = {}
        self._frames: list[_Frame] = []

    # -- bookkeeping ---------------------------------------------------------

    def block_stats(self, block_id: str) -> BlockStats:
        st = self.stats.get(block_id)
        if st is None:
            st = self.stats[block_id] = BlockStats(block_id)
        return st

    def execution_index(self, block_id: str) -> int:
        return self._exec_index.get(block_id, 0)

    def execution_indices(self) -> dict[str, int]:
        return dict(self._exec_index)

    def set_execution_index(self, block_id: str, index: int) -> None:
        if index < 0:
            raise ValueError("execution index must be nonnegative")
        self._exec_index[block_id] = index

    @property
    def depth(self) -> int:
        return len(self._frames)

    def mode_for(self, block_id: str, index: int, effects: SideEffectSet | None = None) -> BlockMode:
        if self.phase == "record":
            return BlockMode.RECORD_EXECUTE
        if self.mode_provider is not None:
            return self.mode_provider(block_id, index)
        if effects is not None and self.store is not None and self.store.has_checkpoint(block_id, index):
            return BlockMode.REPLAY_SKIP
        return BlockMode.REPLAY_STEP

    # -- block protocol ------------------------------------------------------

    def block_begin(self, block_id: str, effects: SideEffectSet | None) -> Decision:
        """Enter a block.  On ``SKIP`` the effects are already restored and
        :meth:`block_end` must not be called."""
        if any(f.block_id == block_id for f in self._frames):
            raise NestingViolationError(f"block {block_id!r} entered while already open")
        index = self.execution_index(block_id)
        mode = self.mode_for(block_id, index, effects)
        self.modes_seen.append((block_id, index, mode))
        st = self.block_stats(block_id)
        if mode is BlockMode.REPLAY_SKIP:
            if effects is None:
                raise MissingCheckpointError(f"{block_id!r} has no declared effects and cannot be skipped")
            if self.store is None or not self.store.has_checkpoint(block_id, index):
                raise MissingCheckpointError(f"plan skips {block_id!r}[{index}] but no checkpoint exists")
            self.restore_side_effects(block_id, index, effects)
            st.skipped += 1
            self._exec_index[block_id] = index + 1
            return Decision.SKIP
        captured = [] if self.phase == "record" else None
        self._frames.append(_Frame(block_id, index, self.clock(), captured))
        return Decision.EXECUTE

    def block_end(self, block_id: str, effects: SideEffectSet | None) -> bool:
        """Leave an executed block; returns True when a checkpoint was taken."""
        if not self._frames or self._frames[-1].block_id != block_id:
            open_ids = [f.block_id for f in self._frames]
            raise NestingViolationError(f"end of {block_id!r} does not match open blocks {open_ids}")
        frame = self._frames.pop()
        elapsed = max(0.0, self.clock() - frame.started)
        st = self.block_stats(block_id)
        st.sum_C += elapsed
        st.n += 1
        self._exec_index[block_id] = frame.index + 1
        if self.phase != "record" or effects is None or self.materializer is None:
            return False
        if self.policy == "never":
            return False
        self._drain_reports()
        if self.policy == "always":
            self._materialize(st, frame, effects, None, 0.0)
            return True

        projected = st.projected_cost()
        snapshot = None
        snapshot_time = 0.0
        if projected is None:
            # first decision for this block: take a real snapshot and price
            # its serialization from the process-wide byte rate
            t0 = self.clock()
            snapshot = [(n, codec.capture(v)) for n, v in effects.items()]
            snapshot_time = self.clock() - t0
            nbytes = sum(codec.payload_nbytes(v) for _, v in snapshot)
            projected = snapshot_time + nbytes * serialize_seconds_per_byte()
            st.calibration = projected
        # writes still in flight are priced at the projection until their report lands
        pending = sum(max(0.0, projected - crit) for crit in st._pending_costs.values())
        mat_mean = (st.sum_M + pending + projected) / (st.k + 1)
        compute_mean = st.sum_C / st.n
        if compute_mean <= 0.0 or not joint_should_materialize(mat_mean, compute_mean, st.n, st.k, self.params):
            return False
        self._materialize(st, frame, effects, snapshot, snapshot_time)
        return True

    def skip_block(self, block_id: str, effects: SideEffectSet | None) -> Iterator[None]:
        """Iterate once (execute) or not at all (skipped and restored)."""
        if self.block_begin(block_id, effects) is Decision.EXECUTE:
            yield
            self.block_end(block_id, effects)

    def capture_log(self, line: str) -> None:
        """Attach a log line to every executing block so skipping can replay it."""
        for frame in self._frames:
            if frame.captured is not None:
                frame.captured.append(line)

    # -- materialization -----------------------------------------------------

    def _log_values(self, frame: _Frame) -> list:
        if not frame.captured:
            return []
        return [ValueRecord(LOG_SLOT, Kind.STRING, "\n".join(frame.captured).encode("utf-8"))]

    def _materialize(self, st, frame, effects, snapshot, precharged: float) -> None:
        t0 = self.clock()
        captured = snapshot is not None
        values = (snapshot if captured else list(effects.items())) + self._log_values(frame)
        batch = SnapshotBatch([(frame.block_id, frame.index, values)])
        self.materializer.submit(batch, dispatch=True, captured=captured)
        critical = precharged + (self.clock() - t0)
        st.sum_M += critical
        st.sum_M_critical += critical
        st.k += 1
        st.checkpoint_indices.append(frame.index)
        if self.charge_background:
            st._pending_costs[frame.index] = critical
        else:
            st._completed_costs.append(critical)
        self._drain_reports()

    def _drain_reports(self) -> None:
        if self.materializer is None:
            return
        for report in self.materializer.drain_reports():
            self._apply_report(report)

    def _apply_report(self, report: WriteReport) -> None:
        st = self.block_stats(report.block_id)
        if not self.materializer.background:
            return
        st.sum_M_background += report.wall_seconds
        st.sum_M_background_cpu += report.cpu_seconds
        critical = st._pending_costs.pop(report.execution_index, None)
        if critical is None:
            return
        st.sum_M += report.cpu_seconds
        st._completed_costs.append(critical + report.cpu_seconds)

    def finish(self):
        """Flush outstanding writes and fold their costs into the stats."""
        if self.materializer is None:
            return None
        status = self.materializer.flush()
        self._drain_reports()
        return status

    # -- restoration ---------------------------------------------------------

    def restore_side_effects(
        self, block_id: str, execution_index: int, effects: SideEffectSet, *, replay_logs: bool = True
    ) -> None:
        t0 = self.clock()
        entry = self.store.get_entry(block_id, execution_index)
        records = {v.name: v for v in entry.values}
        logs = records.pop(LOG_SLOT, None)
        if set(records) != set(effects.names):
            raise SlotMismatchError(
                f"{block_id}[{execution_index}]: stored slots {sorted(records)} "
                f"!= declared {sorted(effects.names)}"
            )
        for name in effects.names:
            effects.apply(name, codec.from_record(records[name]))
        st = self.block_stats(block_id)
        st.sum_R += max(0.0, self.clock() - t0)
        st.restores += 1
        if replay_logs and logs is not None and self.on_restored_logs is not None:
            self.on_restored_logs(block_id, execution_index, logs.payload.decode("utf-8"))
