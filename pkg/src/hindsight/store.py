"""Durable per-run storage of checkpoint entries.

Layout of one run::

    <dir>/<run_id>/manifest              JSON, versioned, self-checksummed
    <dir>/<run_id>/segments/0000.seg     append-only frames
    <dir>/<run_id>/logs/                 record and replay logs

Each segment is a sequence of frames ``[u64 length][8-byte digest][payload]``
where ``length`` counts payload bytes and the digest is an 8-byte BLAKE2b of
the payload.  This framing is the compatibility surface between record and
replay and must not change.

The store does not lock: during record a single writer (the background
materializer) appends, and after sealing any number of replay workers read.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, NamedTuple

from . import codec
from .codec import CheckpointEntry, ValueRecord
from .errors import (
    CorruptEntryError,
    CorruptManifestError,
    DuplicateEntryError,
    EntryNotFoundError,
    RunAlreadySealedError,
    RunNotFoundError,
    RunNotSealedError,
    StoreError,
    StoreIOError,
)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
FRAME_HEADER = struct.Struct("<Q8s")
SEGMENT_LIMIT = 256 * 1024 * 1024


class EntryRef(NamedTuple):
    execution_index: int
    segment: int
    offset: int
    length: int


@dataclass
class RunManifest:
    run_id: str
    created_at: str
    epsilon: float
    c_factor: float
    workload_fingerprint: str = ""
    sealed: bool = False
    block_table: dict[str, list[EntryRef]] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        body = asdict(self)
        body["block_table"] = {
            block: [list(ref) for ref in refs] for block, refs in self.block_table.items()
        }
        return body

    @classmethod
    def from_json(cls, body: dict) -> "RunManifest":
        table = {
            block: [EntryRef(*map(int, ref)) for ref in refs]
            for block, refs in body.get("block_table", {}).items()
        }
        for block, refs in table.items():
            indices = [r.execution_index for r in refs]
            if any(a >= b for a, b in zip(indices, indices[1:])):
                raise CorruptManifestError(f"execution indices of {block!r} are not increasing")
        return cls(
            run_id=body["run_id"],
            created_at=body["created_at"],
            epsilon=float(body["epsilon"]),
            c_factor=float(body["c_factor"]),
            workload_fingerprint=body.get("workload_fingerprint", ""),
            sealed=bool(body.get("sealed", False)),
            block_table=table,
            meta=body.get("meta", {}),
        )


def _canonical(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def write_manifest(path: Path, manifest: RunManifest) -> None:
    body = manifest.to_json()
    doc = {
        "schema": MANIFEST_SCHEMA,
        "manifest": body,
        "checksum": codec.digest(_canonical(body)).hex(),
    }
    tmp = path.with_suffix(".tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise StoreIOError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path: Path) -> RunManifest:
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise StoreIOError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
        body = doc["manifest"]
        schema = doc["schema"]
        checksum = doc["checksum"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptManifestError(f"{path}: unreadable manifest ({exc})") from exc
    if schema != MANIFEST_SCHEMA:
        raise CorruptManifestError(f"{path}: unsupported manifest schema {schema}")
    if codec.digest(_canonical(body)).hex() != checksum:
        raise CorruptManifestError(f"{path}: manifest checksum mismatch")
    try:
        return RunManifest.from_json(body)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptManifestError(f"{path}: malformed manifest ({exc})") from exc


def run_path(directory: str | os.PathLike, run_id: str) -> Path:
    return Path(directory) / run_id


class RunHandle:
    """Open run.  Created by :func:`open_run`."""

    def __init__(self, root: Path, manifest: RunManifest, mode: str):
        self.root = root
        self.manifest = manifest
        self.mode = mode
        self.read_times: list[tuple[str, int, float]] = []
        self._index: dict[str, dict[int, EntryRef]] = {
            block: {ref.execution_index: ref for ref in refs}
            for block, refs in manifest.block_table.items()
        }
        self._segment_no: int | None = None
        self._segment_fh = None
        self._read_fds: dict[int, int] = {}
        self._dirty = False

    # -- paths ---------------------------------------------------------------

    @property
    def run_id(self) -> str:
        return self.manifest.run_id

    @property
    def segments_dir(self) -> Path:
        return self.root / "segments"

    @property
    def logs_dir(self) -> Path:
        return self.root / "logs"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest"

    def segment_path(self, number: int) -> Path:
        return self.segments_dir / f"{number:04d}.seg"

    @property
    def sealed(self) -> bool:
        return self.manifest.sealed

    # -- writing -------------------------------------------------------------

    def _ensure_writable(self) -> None:
        if self.mode != "record":
            raise StoreError(f"run {self.run_id!r} is open read-only")
        if self.manifest.sealed:
            raise RunAlreadySealedError(f"run {self.run_id!r} is sealed")

    def _open_segment(self, incoming: int):
        fh = self._segment_fh
        if fh is not None and fh.tell() + incoming <= SEGMENT_LIMIT:
            return fh
        if fh is not None:
            fh.flush()
            os.fsync(fh.fileno())
            fh.close()
        existing = [int(p.stem) for p in self.segments_dir.glob("*.seg") if p.stem.isdigit()]
        self._segment_no = max(existing, default=-1) + 1
        self._segment_fh = open(self.segment_path(self._segment_no), "ab")
        return self._segment_fh

    def put_encoded(self, block_id: str, execution_index: int, payload: bytes, payload_digest: bytes) -> EntryRef:
        """Append an already-encoded entry payload."""
        self._ensure_writable()
        known = self._index.setdefault(block_id, {})
        if execution_index in known:
            raise DuplicateEntryError(f"{block_id!r} already has an entry for index {execution_index}")
        refs = self.manifest.block_table.setdefault(block_id, [])
        if refs and refs[-1].execution_index > execution_index:
            raise StoreError(
                f"{block_id!r}: index {execution_index} written after {refs[-1].execution_index}"
            )
        frame = FRAME_HEADER.pack(len(payload), payload_digest)
        try:
            fh = self._open_segment(len(frame) + len(payload))
            offset = fh.tell()
            fh.write(frame)
            fh.write(payload)
        except OSError as exc:
            raise StoreIOError(f"cannot append to segment: {exc}") from exc
        ref = EntryRef(execution_index, self._segment_no, offset, len(payload))
        known[execution_index] = ref
        refs.append(ref)
        self._dirty = True
        return ref

    def put_checkpoint(self, block_id: str, execution_index: int, values: Iterable[ValueRecord]) -> EntryRef:
        payload = codec.encode_entry(block_id, execution_index, values)
        return self.put_encoded(block_id, execution_index, payload, codec.digest(payload))

    def flush(self) -> None:
        """Make every appended entry durable and persist the manifest."""
        if self.mode != "record":
            return
        try:
            if self._segment_fh is not None:
                self._segment_fh.flush()
                os.fsync(self._segment_fh.fileno())
        except OSError as exc:
            raise StoreIOError(f"cannot sync segment: {exc}") from exc
        write_manifest(self.manifest_path, self.manifest)
        self._dirty = False

    def seal(self) -> None:
        self._ensure_writable()
        self.manifest.sealed = True
        self.flush()

    # -- reading -------------------------------------------------------------

    def list_checkpoints(self, block_id: str) -> list[int]:
        return sorted(self._index.get(block_id, {}))

    def has_checkpoint(self, block_id: str, execution_index: int) -> bool:
        return execution_index in self._index.get(block_id, {})

    def blocks(self) -> list[str]:
        return sorted(self._index)

    def _read_fd(self, segment: int) -> int:
        fd = self._read_fds.get(segment)
        if fd is None:
            if self._segment_fh is not None and segment == self._segment_no:
                self._segment_fh.flush()
            fd = os.open(self.segment_path(segment), os.O_RDONLY)
            self._read_fds[segment] = fd
        elif self._segment_fh is not None and segment == self._segment_no:
            self._segment_fh.flush()
        return fd

    def _read_entry(self, block_id: str, ref: EntryRef) -> CheckpointEntry:
        try:
            fd = self._read_fd(ref.segment)
            header = os.pread(fd, FRAME_HEADER.size, ref.offset)
            if len(header) != FRAME_HEADER.size:
                raise CorruptEntryError(f"{block_id}[{ref.execution_index}]: truncated frame header")
            length, stored_digest = FRAME_HEADER.unpack(header)
            if length != ref.length:
                raise CorruptEntryError(
                    f"{block_id}[{ref.execution_index}]: frame length {length} != manifest {ref.length}"
                )
            payload = os.pread(fd, length, ref.offset + FRAME_HEADER.size)
        except FileNotFoundError as exc:
            raise CorruptEntryError(f"{block_id}[{ref.execution_index}]: segment missing") from exc
        except OSError as exc:
            raise StoreIOError(f"cannot read segment {ref.segment}: {exc}") from exc
        if len(payload) != length:
            raise CorruptEntryError(f"{block_id}[{ref.execution_index}]: truncated payload")
        if codec.digest(payload) != stored_digest:
            raise CorruptEntryError(f"{block_id}[{ref.execution_index}]: digest mismatch")
        try:
            entry = codec.decode_entry(payload, stored_digest)
        except ValueError as exc:
            raise CorruptEntryError(f"{block_id}[{ref.execution_index}]: {exc}") from exc
        if entry.block_id != block_id or entry.execution_index != ref.execution_index:
            raise CorruptEntryError(
                f"{block_id}[{ref.execution_index}]: frame holds {entry.block_id}[{entry.execution_index}]"
            )
        return entry

    def get_entry(self, block_id: str, execution_index: int) -> CheckpointEntry:
        ref = self._index.get(block_id, {}).get(execution_index)
        if ref is None:
            raise EntryNotFoundError(f"no checkpoint for {block_id!r} at index {execution_index}")
        t0 = time.perf_counter()
        entry = self._read_entry(block_id, ref)
        self.read_times.append((block_id, execution_index, time.perf_counter() - t0))
        return entry

    def get_checkpoint(self, block_id: str, execution_index: int) -> list[ValueRecord]:
        return list(self.get_entry(block_id, execution_index).values)

    def latest_checkpoint_at_or_before(
        self, block_id: str, execution_index: int
    ) -> tuple[int, list[ValueRecord]] | None:
        refs = self.manifest.block_table.get(block_id, [])
        # refs are kept in increasing index order
        lo, hi = 0, len(refs)
        while lo < hi:
            mid = (lo + hi) // 2
            if refs[mid].execution_index <= execution_index:
                lo = mid + 1
            else:
                hi = mid
        if lo == 0:
            return None
        found = refs[lo - 1].execution_index
        return found, self.get_checkpoint(block_id, found)

    def verify(self) -> list[str]:
        """Read back every entry; returns a list of problems (empty if clean)."""
        problems = []
        for block_id, refs in self.manifest.block_table.items():
            for ref in refs:
                try:
                    self._read_entry(block_id, ref)
                except StoreError as exc:
                    problems.append(str(exc))
        return problems

    # -- lifecycle -----------------------------------------------------------

    def close(self) -> None:
        if self._segment_fh is not None:
            try:
                if self.mode == "record" and self._dirty:
                    self.flush()
            finally:
                self._segment_fh.close()
                self._segment_fh = None
        for fd in self._read_fds.values():
            os.close(fd)
        self._read_fds.clear()

    def __enter__(self) -> "RunHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_run(
    directory: str | os.PathLike,
    run_id: str,
    params=None,
    *,
    mode: str = "record",
    workload_fingerprint: str = "",
) -> RunHandle:
    """Create or load a run.

    ``mode="record"`` creates the run (or reopens an unsealed one) for
    appending; it refuses a sealed run.  ``mode="replay"`` loads an existing
    sealed run read-only.
    """
    if mode not in ("record", "replay"):
        raise ValueError(f"mode must be 'record' or 'replay', not {mode!r}")
    root = run_path(directory, run_id)
    manifest_path = root / "manifest"
    if mode == "replay":
        try:
            manifest = read_manifest(manifest_path)
        except FileNotFoundError:
            raise RunNotFoundError(f"no run {run_id!r} in {directory}") from None
        if not manifest.sealed:
            raise RunNotSealedError(f"run {run_id!r} was never sealed")
        return RunHandle(root, manifest, mode)

    try:
        manifest = read_manifest(manifest_path)
    except FileNotFoundError:
        manifest = None
    if manifest is not None:
        if manifest.sealed:
            raise RunAlreadySealedError(f"run {run_id!r} is already sealed")
        logger.info("reopening unsealed run %s", run_id)
        return RunHandle(root, manifest, mode)

    epsilon = getattr(params, "epsilon", 0.0667)
    c_factor = getattr(params, "c", 1.0)
    manifest = RunManifest(
        run_id=run_id,
        created_at=datetime.now(timezone.utc).isoformat(),
        epsilon=float(epsilon),
        c_factor=float(c_factor),
        workload_fingerprint=workload_fingerprint,
    )
    try:
        (root / "segments").mkdir(parents=True, exist_ok=True)
        (root / "logs").mkdir(exist_ok=True)
    except OSError as exc:
        raise StoreIOError(f"cannot create run directory {root}: {exc}") from exc
    write_manifest(manifest_path, manifest)
    return RunHandle(root, manifest, mode)
