"""State shared by one record or replay execution of a workload."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping

from .errors import ReplayPlanError
from .logs import LogRecord, LogSink
from .runtime import SkipBlockRuntime
from .trainscript.builtins import PURE_FUNCTIONS
from .trainscript.interpreter import evaluate, loggable
from .trainscript.nodes import Expr
from .trainscript.parser import parse_expression

RESUME = "resume"
PSEUDORESUME = "pseudoresume"
MODES = (RESUME, PSEUDORESUME)


class EarlyStop(Exception):
    """Raised out of the main loop once a worker has finished its range."""


@dataclass(frozen=True)
class HindsightStatement:
    """A log statement added after the fact: ``name=expression``."""

    name: str
    source: str
    expr: Expr

    @classmethod
    def parse(cls, text: str) -> "HindsightStatement":
        name, sep, source = text.partition("=")
        name, source = name.strip(), source.strip()
        if not sep or not name or not source:
            raise ValueError(f"hindsight statement must look like name=expr, got {text!r}")
        return cls(name, source, parse_expression(source))

    def to_text(self) -> str:
        return f"{self.name}={self.source}"


class ExecutionContext:
    """Glue between a workload, the SkipBlock runtime and the log sink.

    ``plan`` is ``None`` while recording.  During replay the main loop is
    driven by :meth:`main_loop`, which applies the worker's epoch range and
    recovery mode.
    """

    def __init__(
        self,
        runtime: SkipBlockRuntime,
        sink: LogSink,
        *,
        plan=None,
        clock: Callable[[], float] = time.perf_counter,
    ):
        self.runtime = runtime
        self.sink = sink
        self.plan = plan
        self.clock = clock
        self.epoch = 0
        self.epochs: int | None = None
        self.loop_timings: dict[str, float] = {}
        self.epoch_index_snapshots: list[dict[str, int]] = []
        self.resume_seconds = 0.0
        runtime.on_restored_logs = self._on_restored_logs
        self.restored_log_handler: Callable[[str], None] = self._emit_line

    @property
    def recording(self) -> bool:
        return self.plan is None

    # -- logging -------------------------------------------------------------

    def log(self, epoch: int, step: int, name: str, value: Any, hindsight: bool = False) -> None:
        rec = LogRecord(epoch, step, name, loggable(value), hindsight)
        if not hindsight:
            self.runtime.capture_log(rec.to_line())
        self.sink.emit(rec)

    def _emit_line(self, line: str) -> None:
        self.sink.emit(LogRecord.from_line(line))

    def _on_restored_logs(self, block_id: str, index: int, text: str) -> None:
        for line in text.splitlines():
            if line:
                self.restored_log_handler(line)

    # -- hindsight probes ----------------------------------------------------

    def probing(self, loop_id: str) -> bool:
        plan = self.plan
        return plan is not None and bool(plan.hindsight) and plan.probe_loop == loop_id and plan.in_range(self.epoch)

    def evaluate_hindsight(self, loop_id: str, env: Mapping[str, Any], functions=None) -> list[tuple[str, Any]]:
        """Values of the injected statements attached to ``loop_id``, if any."""
        if not self.probing(loop_id):
            return []
        functions = PURE_FUNCTIONS if functions is None else functions
        return [(st.name, loggable(evaluate(st.expr, env, functions, readonly=True))) for st in self.plan.hindsight]

    # -- timing --------------------------------------------------------------

    def add_loop_time(self, loop_id: str, seconds: float) -> None:
        self.loop_timings[loop_id] = self.loop_timings.get(loop_id, 0.0) + seconds

    def epoch_starts(self) -> dict[str, list[int]]:
        """Per block, its execution index at the start of every epoch."""
        blocks = set()
        for snap in self.epoch_index_snapshots:
            blocks.update(snap)
        blocks.update(self.runtime.stats)
        return {b: [snap.get(b, 0) for snap in self.epoch_index_snapshots] for b in sorted(blocks)}

    # -- main loop -----------------------------------------------------------

    def main_loop(self, count: int, resume: Callable[[int], int] | None = None) -> Iterator[int]:
        """Iterate the main loop's epochs.

        Recording runs every epoch.  A replay worker with range ``[lo, hi)``
        either restores once and starts at ``lo`` (resume) or starts at 0
        and relies on SkipBlocks to fast-forward the prefix (pseudoresume);
        it stops before ``hi``.

        ``resume(lo)`` restores the newest usable checkpoint and returns the
        epoch execution continues from (at most ``lo``).
        """
        self.epochs = count
        if self.plan is None:
            for e in range(count):
                self.epoch = e
                self.epoch_index_snapshots.append(self.runtime.execution_indices())
                yield e
            return
        lo, hi = self.plan.epoch_range
        if lo >= hi:
            raise EarlyStop
        start = 0
        if self.plan.mode == RESUME and lo > 0:
            if resume is None:
                raise ReplayPlanError("this workload cannot resume from a checkpoint; use pseudoresume")
            t0 = self.clock()
            start = resume(lo)
            self.resume_seconds = self.clock() - t0
        for e in range(start, hi):
            self.epoch = e
            yield e
        if hi < count:
            raise EarlyStop


def captured_json(name: str, value: Any) -> str:
    return json.dumps({"name": name, "value": value})
