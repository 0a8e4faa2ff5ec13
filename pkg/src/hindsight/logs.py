"""Line-delimited training logs, worker-log merging and the deferred diff.

A log file starts with one header line ``{"_meta": {...}}`` followed by one
JSON object per record with the fixed field order
``epoch, step, name, value, hindsight, pid``.  Records are kept sorted by
``(epoch, step, name)`` so comparison is a streaming walk.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import MalformedLogError, OverlappingRangesError

_F64 = struct.Struct("<d")


@dataclass(frozen=True)
class LogRecord:
    epoch: int
    step: int
    name: str
    value: int | float | str
    hindsight: bool = False
    pid: int | None = None

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.epoch, self.step, self.name)

    def with_pid(self, pid: int | None) -> "LogRecord":
        return LogRecord(self.epoch, self.step, self.name, self.value, self.hindsight, pid)

    def to_line(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "step": self.step,
                "name": self.name,
                "value": self.value,
                "hindsight": self.hindsight,
                "pid": self.pid,
            },
            allow_nan=True,
        )

    @classmethod
    def from_obj(cls, obj, where: str = "") -> "LogRecord":
        if not isinstance(obj, dict):
            raise MalformedLogError(f"{where}record is not an object")
        try:
            epoch, step, name, value = obj["epoch"], obj["step"], obj["name"], obj["value"]
        except KeyError as exc:
            raise MalformedLogError(f"{where}record lacks field {exc.args[0]!r}") from None
        hindsight = obj.get("hindsight", False)
        pid = obj.get("pid")
        if not _is_count(epoch) or not _is_count(step):
            raise MalformedLogError(f"{where}epoch and step must be nonnegative integers")
        if not isinstance(name, str):
            raise MalformedLogError(f"{where}name must be a string")
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise MalformedLogError(f"{where}value must be a number or a string")
        if not isinstance(hindsight, bool):
            raise MalformedLogError(f"{where}hindsight must be a boolean")
        if pid is not None and not _is_count(pid):
            raise MalformedLogError(f"{where}pid must be a nonnegative integer or null")
        return cls(epoch, step, name, value, hindsight, pid)

    @classmethod
    def from_line(cls, line: str, where: str = "") -> "LogRecord":
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLogError(f"{where}invalid JSON: {exc.msg}") from None
        return cls.from_obj(obj, where)


def _is_count(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def values_identical(a, b) -> bool:
    """Type-aware equality; floats compare by bit pattern."""
    if type(a) is not type(b):
        return False
    if isinstance(a, float):
        return _F64.pack(a) == _F64.pack(b)
    return a == b


def records_identical(a: LogRecord, b: LogRecord) -> bool:
    """Field-by-field comparison that ignores the worker id."""
    return a.key == b.key and a.hindsight == b.hindsight and values_identical(a.value, b.value)


def sort_records(records: Iterable[LogRecord]) -> list[LogRecord]:
    return sorted(records, key=lambda r: r.key)


@dataclass
class WorkerLog:
    meta: dict = field(default_factory=dict)
    records: list[LogRecord] = field(default_factory=list)

    @property
    def epoch_range(self) -> tuple[int, int] | None:
        rng = self.meta.get("epoch_range")
        if rng is not None:
            return int(rng[0]), int(rng[1])
        if not self.records:
            return None
        epochs = [r.epoch for r in self.records]
        return min(epochs), max(epochs) + 1

    def non_hindsight(self) -> list[LogRecord]:
        return [r for r in self.records if not r.hindsight]

    def hindsight(self) -> list[LogRecord]:
        return [r for r in self.records if r.hindsight]


class LogSink:
    """Collects the records of one execution, keeping only its epoch range."""

    def __init__(self, pid: int | None = None, epoch_range: tuple[int, int] | None = None):
        self.pid = pid
        self.epoch_range = epoch_range
        self.records: list[LogRecord] = []

    def accepts(self, epoch: int) -> bool:
        if self.epoch_range is None:
            return True
        lo, hi = self.epoch_range
        return lo <= epoch < hi

    def emit(self, record: LogRecord) -> bool:
        if not self.accepts(record.epoch):
            return False
        self.records.append(record.with_pid(self.pid))
        return True

    def sorted_records(self) -> list[LogRecord]:
        return sort_records(self.records)


# -- files --------------------------------------------------------------------


def write_log(path: str | os.PathLike, records: Iterable[LogRecord], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_meta": meta or {}}) + "\n")
        for rec in sort_records(records):
            fh.write(rec.to_line() + "\n")
    os.replace(tmp, path)
    return path


def read_log(path: str | os.PathLike) -> WorkerLog:
    """Parse a log file; a missing header is tolerated, bad lines are not."""
    path = Path(path)
    meta: dict = {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            where = f"{path.name}:{lineno}: "
            if lineno == 1:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedLogError(f"{where}invalid JSON: {exc.msg}") from None
                if isinstance(obj, dict) and "_meta" in obj:
                    if not isinstance(obj["_meta"], dict):
                        raise MalformedLogError(f"{where}header must be an object")
                    meta = obj["_meta"]
                    continue
                records.append(LogRecord.from_obj(obj, where))
                continue
            records.append(LogRecord.from_line(line, where))
    keys = [r.key for r in records]
    if keys != sorted(keys):
        raise MalformedLogError(f"{path.name}: records are not ordered by (epoch, step, name)")
    rng = meta.get("epoch_range")
    if rng is not None and (
        not isinstance(rng, list) or len(rng) != 2 or not all(_is_count(x) for x in rng) or rng[0] > rng[1]
    ):
        raise MalformedLogError(f"{path.name}: bad epoch_range {rng!r}")
    return WorkerLog(meta, records)


# -- merge and diff -----------------------------------------------------------


def merge_logs(logs: Sequence[WorkerLog]) -> WorkerLog:
    """Combine worker logs with disjoint epoch ranges into one ordered log."""
    ranges = sorted((lg.epoch_range, i) for i, lg in enumerate(logs) if lg.epoch_range is not None)
    ranges = [(r, i) for r, i in ranges if r[0] < r[1]]
    for (a, ia), (b, ib) in zip(ranges, ranges[1:]):
        if b[0] < a[1]:
            raise OverlappingRangesError(f"workers {ia} {list(a)} and {ib} {list(b)} overlap")
    records = sort_records(r for lg in logs for r in lg.records)
    covered = [list(r) for r, _ in ranges]
    meta = {"merged_from": len(logs), "epoch_ranges": covered}
    if covered:
        meta["epoch_range"] = [covered[0][0], covered[-1][1]] if _contiguous(covered) else None
    if meta.get("epoch_range") is None:
        meta.pop("epoch_range", None)
    return WorkerLog(meta, records)


def _contiguous(ranges: list[list[int]]) -> bool:
    return all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))


def coverage_gaps(ranges: Iterable[tuple[int, int]], epochs: int) -> list[tuple[int, int]]:
    """Sub-ranges of ``[0, epochs)`` that no range covers."""
    gaps = []
    cursor = 0
    for lo, hi in sorted(r for r in ranges if r[0] < r[1]):
        if lo > cursor:
            gaps.append((cursor, min(lo, epochs)))
        cursor = max(cursor, hi)
    if cursor < epochs:
        gaps.append((cursor, epochs))
    return [g for g in gaps if g[0] < g[1]]


def _to_ranges(epochs: Iterable[int]) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for e in sorted(set(epochs)):
        if out and out[-1][1] == e:
            out[-1][1] = e + 1
        else:
            out.append([e, e + 1])
    return [tuple(r) for r in out]


@dataclass
class DiffReport:
    ok: bool
    compared: int
    record_count: int
    replay_count: int
    mismatched: int = 0
    missing: int = 0
    extra: int = 0
    first_divergence: dict | None = None
    missing_epochs: list[tuple[int, int]] = field(default_factory=list)
    extra_epochs: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "compared": self.compared,
            "record_count": self.record_count,
            "replay_count": self.replay_count,
            "mismatched": self.mismatched,
            "missing": self.missing,
            "extra": self.extra,
            "first_divergence": self.first_divergence,
            "missing_epochs": [list(r) for r in self.missing_epochs],
            "extra_epochs": [list(r) for r in self.extra_epochs],
        }

    def summary(self) -> str:
        if self.ok:
            return f"OK: {self.compared} records identical"
        d = self.first_divergence or {}
        where = f"epoch {d.get('epoch')} step {d.get('step')} name {d.get('name')!r}"
        parts = [f"DIVERGENCE at {where} ({d.get('kind')})"]
        parts.append(f"mismatched={self.mismatched} missing={self.missing} extra={self.extra}")
        if self.missing_epochs:
            parts.append("missing epochs " + ", ".join(f"[{a},{b})" for a, b in self.missing_epochs))
        if self.extra_epochs:
            parts.append("extra epochs " + ", ".join(f"[{a},{b})" for a, b in self.extra_epochs))
        return "; ".join(parts)


def _keyed(records: list[LogRecord]) -> dict:
    seen: dict = {}
    out = {}
    for r in records:
        n = seen.get(r.key, 0)
        seen[r.key] = n + 1
        out[(r.key, n)] = r
    return out


def _value_repr(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def deferred_diff(record: WorkerLog | Sequence[LogRecord], replay: WorkerLog | Sequence[LogRecord]) -> DiffReport:
    """Compare the non-hindsight records of two logs, ignoring worker ids."""
    a = sort_records(r for r in _records(record) if not r.hindsight)
    b = sort_records(r for r in _records(replay) if not r.hindsight)
    ok = len(a) == len(b) and all(records_identical(x, y) for x, y in zip(a, b))
    report = DiffReport(ok, min(len(a), len(b)), len(a), len(b))
    if ok:
        return report
    ka, kb = _keyed(a), _keyed(b)
    divergences = []
    for key in ka.keys() | kb.keys():
        ra, rb = ka.get(key), kb.get(key)
        if ra is None:
            report.extra += 1
            divergences.append((key, "extra", None, rb.value))
        elif rb is None:
            report.missing += 1
            divergences.append((key, "missing", ra.value, None))
        elif not records_identical(ra, rb):
            report.mismatched += 1
            divergences.append((key, "value", ra.value, rb.value))
    if divergences:
        ((epoch, step, name), _), kind, expected, found = min(divergences, key=lambda d: d[0])
        report.first_divergence = {
            "epoch": epoch,
            "step": step,
            "name": name,
            "kind": kind,
            "record": _value_repr(expected),
            "replay": _value_repr(found),
        }
    epochs_a = {r.epoch for r in a}
    epochs_b = {r.epoch for r in b}
    report.missing_epochs = _to_ranges(epochs_a - epochs_b)
    report.extra_epochs = _to_ranges(epochs_b - epochs_a)
    return report


def _records(log) -> list[LogRecord]:
    return log.records if isinstance(log, WorkerLog) else list(log)
