"""Off-critical-path checkpoint writing.

The caller pays only for a snapshot copy and an enqueue.  Encoding, hashing
and the durable write happen on at most ``bound`` writer threads.  Writers
encode concurrently but commit to the store strictly in submission order, so
entries of one block land in execution-index order and the store sees a
single writer at a time.

Submissions are buffered until ``batch_threshold`` value objects have
accumulated, until the caller asks for a dispatch (the runtime does so at the
end of every block that checkpoints), or until :meth:`flush`.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from . import codec
from .codec import ValueRecord
from .errors import QueueClosedError

logger = logging.getLogger(__name__)

DEFAULT_BOUND = 2
DEFAULT_BATCH_THRESHOLD = 5000
DEFAULT_QUEUE_CAPACITY = 64


@dataclass(frozen=True)
class EncodedEntry:
    """An entry whose payload was already produced on the caller's side."""

    payload: bytes
    digest: bytes
    object_count: int


@dataclass
class SnapshotBatch:
    """Checkpoint entries handed to the materializer as one write unit.

    ``items`` holds ``(block_id, execution_index, values)``; ``values`` is a
    sequence of ``(name, value)`` pairs, a sequence of :class:`ValueRecord`,
    or an :class:`EncodedEntry`.
    """

    items: list[tuple[str, int, Any]]
    created_at: float = field(default_factory=time.monotonic)

    @property
    def object_count(self) -> int:
        total = 0
        for _, _, values in self.items:
            if isinstance(values, EncodedEntry):
                total += values.object_count
            else:
                total += len(values)
        return total


@dataclass(frozen=True)
class WriteFailure:
    block_id: str
    execution_index: int
    message: str

    def __str__(self) -> str:
        return f"{self.block_id}[{self.execution_index}]: {self.message}"


@dataclass(frozen=True)
class WriteReport:
    """Cost of writing one entry, measured on the writer thread."""

    block_id: str
    execution_index: int
    wall_seconds: float
    cpu_seconds: float
    nbytes: int


@dataclass
class WriterStatus:
    in_flight: int = 0
    completed: int = 0
    failed: int = 0
    errors: list[WriteFailure] = field(default_factory=list)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.in_flight, self.completed, self.failed)


class Ticket:
    def __init__(self, seq: int, batch: SnapshotBatch):
        self.seq = seq
        self.batch = batch
        self.error: BaseException | None = None
        self._done = threading.Event()

    @property
    def done(self) -> bool:
        return self._done.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)


def encode_items(batch: SnapshotBatch) -> list[tuple[str, int, bytes, bytes]]:
    out = []
    for block_id, index, values in batch.items:
        if isinstance(values, EncodedEntry):
            out.append((block_id, index, values.payload, values.digest))
            continue
        records = [v if isinstance(v, ValueRecord) else codec.to_record(*v) for v in values]
        payload = codec.encode_entry(block_id, index, records)
        out.append((block_id, index, payload, codec.digest(payload)))
    return out


def _capture_values(values: Any) -> Any:
    if isinstance(values, EncodedEntry):
        return values
    captured = []
    for v in values:
        if isinstance(v, ValueRecord):
            captured.append(v)
        else:
            name, value = v
            captured.append((name, codec.capture(value)))
    return captured


class BackgroundMaterializer:
    """Bounded pool of checkpoint writers in front of a :class:`RunHandle`.

    With ``background=False`` every dispatch is written synchronously on the
    caller's thread; the interface and accounting stay the same.
    """

    def __init__(
        self,
        store,
        *,
        bound: int = DEFAULT_BOUND,
        batch_threshold: int = DEFAULT_BATCH_THRESHOLD,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        background: bool = True,
        on_report: Callable[[WriteReport], None] | None = None,
    ):
        if bound < 1:
            raise ValueError("writer bound must be at least 1")
        if batch_threshold < 1:
            raise ValueError("batch threshold must be at least 1")
        self.store = store
        self.bound = bound
        self.batch_threshold = batch_threshold
        self.background = background
        self.on_report = on_report

        self._lock = threading.Lock()
        self._commit_cv = threading.Condition(self._lock)
        self._pending: list[Ticket] = []
        self._pending_objects = 0
        self._next_seq = 0
        self._next_commit = 0
        self._closed = False
        self._status = WriterStatus()
        self.max_in_flight = 0
        self.dispatches = 0
        self._reports: list[WriteReport] = []

        self._queue: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self._threads: list[threading.Thread] = []
        if background:
            for i in range(bound):
                t = threading.Thread(target=self._worker, name=f"hindsight-writer-{i}", daemon=True)
                t.start()
                self._threads.append(t)

    # -- producer side -------------------------------------------------------

    def submit(self, batch: SnapshotBatch, *, dispatch: bool = False, captured: bool = False) -> Ticket:
        """Capture ``batch`` and queue it; returns without writing.

        Pass ``captured=True`` when the values are already private copies.
        """
        if not captured:
            batch = SnapshotBatch([(b, i, _capture_values(v)) for b, i, v in batch.items], batch.created_at)
        with self._lock:
            if self._closed:
                raise QueueClosedError("materializer has been flushed and closed")
            ticket = Ticket(self._next_seq, batch)
            self._next_seq += 1
            self._pending.append(ticket)
            self._pending_objects += batch.object_count
            ready = dispatch or self._pending_objects >= self.batch_threshold
            group = self._take_pending() if ready else None
        if group:
            self._dispatch(group)
        return ticket

    def dispatch(self) -> None:
        with self._lock:
            group = self._take_pending()
        if group:
            self._dispatch(group)

    def _take_pending(self) -> list[Ticket]:
        group, self._pending, self._pending_objects = self._pending, [], 0
        return group

    def _dispatch(self, group: list[Ticket]) -> None:
        self.dispatches += 1
        if self.background:
            self._queue.put(group)
        else:
            self._process(group)

    @property
    def pending_objects(self) -> int:
        with self._lock:
            return self._pending_objects

    def status(self) -> WriterStatus:
        with self._lock:
            return WriterStatus(
                self._status.in_flight,
                self._status.completed,
                self._status.failed,
                list(self._status.errors),
            )

    def drain_reports(self) -> list[WriteReport]:
        with self._lock:
            out, self._reports = self._reports, []
        return out

    def flush(self) -> WriterStatus:
        """Write everything submitted, close the queue and report the outcome."""
        with self._lock:
            already_closed = self._closed
            self._closed = True
            group = self._take_pending()
        if group:
            self._dispatch(group)
        if self.background and not already_closed:
            for _ in self._threads:
                self._queue.put(None)
            for t in self._threads:
                t.join()
        return self.status()

    close = flush

    # -- writer side ---------------------------------------------------------

    def _worker(self) -> None:
        while True:
            group = self._queue.get()
            if group is None:
                return
            self._process(group)

    def _process(self, group: Sequence[Ticket]) -> None:
        with self._lock:
            self._status.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._status.in_flight)
        try:
            for ticket in group:
                self._write_ticket(ticket)
        finally:
            with self._lock:
                self._status.in_flight -= 1

    def _write_ticket(self, ticket: Ticket) -> None:
        cpu0 = time.thread_time()
        wall0 = time.perf_counter()
        encoded = None
        try:
            encoded = encode_items(ticket.batch)
        except BaseException as exc:  # noqa: BLE001 - reported at flush
            ticket.error = exc
        encode_cpu = time.thread_time() - cpu0
        encode_wall = time.perf_counter() - wall0

        with self._commit_cv:
            while self._next_commit != ticket.seq:
                self._commit_cv.wait()
        try:
            if encoded is not None:
                cpu1 = time.thread_time()
                wall1 = time.perf_counter()
                try:
                    for block_id, index, payload, dig in encoded:
                        self.store.put_encoded(block_id, index, payload, dig)
                    self.store.flush()
                except BaseException as exc:  # noqa: BLE001
                    ticket.error = exc
                write_cpu = time.thread_time() - cpu1
                write_wall = time.perf_counter() - wall1
                total = sum(len(p) for _, _, p, _ in encoded) or 1
                reports = [
                    WriteReport(
                        b,
                        i,
                        (encode_wall + write_wall) * len(p) / total,
                        (encode_cpu + write_cpu) * len(p) / total,
                        len(p),
                    )
                    for b, i, p, _ in encoded
                ]
            else:
                reports = []
        finally:
            with self._commit_cv:
                self._next_commit += 1
                self._commit_cv.notify_all()

        with self._lock:
            if ticket.error is None:
                self._status.completed += 1
                self._reports.extend(reports)
            else:
                self._status.failed += 1
                for b, i, _ in ticket.batch.items:
                    self._status.errors.append(WriteFailure(b, i, repr(ticket.error)))
                logger.error("checkpoint write failed: %r", ticket.error)
        if self.on_report is not None:
            for r in reports if ticket.error is None else ():
                self.on_report(r)
        ticket._done.set()
