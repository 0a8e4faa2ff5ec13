"""Binary encoding of memoized side-effects.

A :class:`ValueRecord` is the unit of checkpointed state: a name, a kind tag
and a kind-specific little-endian payload.  Python values are converted to
records with :func:`to_record` and back with :func:`from_record`; stateful
objects take part through ``state_dict()`` / ``load_state_dict()``.

Entry payload layout (all integers little-endian)::

    u8  format version
    str block_id                 (u32 length + utf-8)
    u64 execution_index
    u32 value count
    value*                       (str name, u8 kind, u64 length, payload)

A composite-map payload is ``u32 count`` followed by nested values in the
same ``value`` layout.
"""

from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Mapping

import numpy as np

ENTRY_FORMAT_VERSION = 1
DIGEST_SIZE = 8

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


class Kind(str, Enum):
    INT = "scalar-int"
    FLOAT = "scalar-float"
    STRING = "string"
    FLOAT_ARRAY = "float-array"
    BLOB = "byte-blob"
    MAP = "composite-map"


_KIND_CODES = {
    Kind.INT: 1,
    Kind.FLOAT: 2,
    Kind.STRING: 3,
    Kind.FLOAT_ARRAY: 4,
    Kind.BLOB: 5,
    Kind.MAP: 6,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

_FLOAT_ITEMSIZES = (2, 4, 8)


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class ValueRecord:
    name: str
    kind: Kind
    payload: bytes

    def __post_init__(self):
        if not isinstance(self.kind, Kind):
            object.__setattr__(self, "kind", Kind(self.kind))
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, "payload", bytes(self.payload))


@dataclass(frozen=True)
class CheckpointEntry:
    block_id: str
    execution_index: int
    values: tuple[ValueRecord, ...]
    payload_digest: bytes

    def names(self) -> list[str]:
        return [v.name for v in self.values]


def digest(data: bytes | memoryview) -> bytes:
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


# -- python value <-> record --------------------------------------------------


def to_record(name: str, value: Any) -> ValueRecord:
    """Encode one python value.

    Supported: ``int``, ``float`` (and numpy scalars), ``str``, ``bytes``,
    floating-point ``ndarray``, string-keyed mappings, and any object that
    exposes ``state_dict()``.
    """
    if isinstance(value, ValueRecord):
        if value.name != name:
            return ValueRecord(name, value.kind, value.payload)
        return value
    if isinstance(value, (bool, np.bool_)):
        raise CodecError(f"{name}: booleans have no checkpoint kind")
    if isinstance(value, (int, np.integer)):
        try:
            return ValueRecord(name, Kind.INT, _I64.pack(int(value)))
        except struct.error as exc:
            raise CodecError(f"{name}: integer {value} does not fit in 64 bits") from exc
    if isinstance(value, (float, np.floating)):
        return ValueRecord(name, Kind.FLOAT, _F64.pack(float(value)))
    if isinstance(value, str):
        return ValueRecord(name, Kind.STRING, value.encode("utf-8"))
    if isinstance(value, (bytes, bytearray, memoryview)):
        return ValueRecord(name, Kind.BLOB, bytes(value))
    if isinstance(value, np.ndarray):
        return ValueRecord(name, Kind.FLOAT_ARRAY, _encode_array(name, value))
    if isinstance(value, Mapping):
        return ValueRecord(name, Kind.MAP, _encode_map(value))
    state_dict = getattr(value, "state_dict", None)
    if callable(state_dict):
        return ValueRecord(name, Kind.MAP, _encode_map(state_dict()))
    raise CodecError(f"{name}: cannot checkpoint value of type {type(value).__name__}")


def from_record(record: ValueRecord) -> Any:
    kind, payload = record.kind, record.payload
    if kind is Kind.INT:
        return _I64.unpack(payload)[0]
    if kind is Kind.FLOAT:
        return _F64.unpack(payload)[0]
    if kind is Kind.STRING:
        return payload.decode("utf-8")
    if kind is Kind.BLOB:
        return payload
    if kind is Kind.FLOAT_ARRAY:
        return _decode_array(payload)
    if kind is Kind.MAP:
        return {r.name: from_record(r) for r in decode_map_records(payload)}
    raise CodecError(f"unknown kind {kind!r}")  # pragma: no cover


def decode_map_records(payload: bytes) -> list[ValueRecord]:
    view = memoryview(payload)
    try:
        (count,) = _U32.unpack_from(view, 0)
        records, pos = _read_values(view, _U32.size, count)
    except struct.error as exc:
        raise CodecError(f"truncated value list: {exc}") from exc
    if pos != len(view):
        raise CodecError("trailing bytes after composite map")
    return records


def _encode_map(mapping: Mapping) -> bytes:
    records = []
    for key, item in mapping.items():
        if not isinstance(key, str):
            raise CodecError(f"composite-map keys must be strings, got {key!r}")
        records.append(to_record(key, item))
    return b"".join((_U32.pack(len(records)), *_value_parts(records)))


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in _FLOAT_ITEMSIZES:
        raise CodecError(f"{name}: only float arrays are supported, got {arr.dtype}")
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = bytes([arr.dtype.itemsize, arr.ndim]) + b"".join(_U64.pack(d) for d in arr.shape)
    # one copy: join reads the array buffer directly
    return b"".join((header, memoryview(np.ascontiguousarray(le)).cast("B")))


def _decode_array(payload: bytes) -> np.ndarray:
    if len(payload) < 2:
        raise CodecError("truncated array header")
    itemsize, ndim = payload[0], payload[1]
    if itemsize not in _FLOAT_ITEMSIZES:
        raise CodecError(f"bad float itemsize {itemsize}")
    start = 2 + 8 * ndim
    if len(payload) < start:
        raise CodecError("truncated array shape")
    shape = tuple(_U64.unpack_from(payload, 2 + 8 * i)[0] for i in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(payload) - start != count * itemsize:
        raise CodecError("array payload length does not match its shape")
    arr = np.frombuffer(payload, dtype=np.dtype(f"<f{itemsize}"), offset=start, count=count)
    return arr.reshape(shape).astype(np.dtype(f"=f{itemsize}"), copy=True)


# -- framing helpers ----------------------------------------------------------


def _write_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _read_str(view: memoryview, pos: int) -> tuple[str, int]:
    (length,) = _U32.unpack_from(view, pos)
    pos += _U32.size
    end = pos + length
    if end > len(view):
        raise CodecError("truncated string")
    return bytes(view[pos:end]).decode("utf-8"), end


def _write_values(records: Iterable[ValueRecord]) -> bytes:
    return b"".join(_value_parts(records))


def _value_parts(records: Iterable[ValueRecord]) -> list:
    parts = []
    seen = set()
    for rec in records:
        if rec.name in seen:
            raise CodecError(f"duplicate value name {rec.name!r}")
        seen.add(rec.name)
        parts.append(_write_str(rec.name))
        parts.append(_U8.pack(_KIND_CODES[rec.kind]))
        parts.append(_U64.pack(len(rec.payload)))
        parts.append(rec.payload)
    return parts


def _read_values(view: memoryview, pos: int, count: int) -> tuple[list[ValueRecord], int]:
    out = []
    seen = set()
    for _ in range(count):
        name, pos = _read_str(view, pos)
        (code,) = _U8.unpack_from(view, pos)
        pos += _U8.size
        (length,) = _U64.unpack_from(view, pos)
        pos += _U64.size
        end = pos + length
        if code not in _CODE_KINDS:
            raise CodecError(f"unknown kind code {code}")
        if end > len(view):
            raise CodecError("truncated value payload")
        if name in seen:
            raise CodecError(f"duplicate value name {name!r}")
        seen.add(name)
        out.append(ValueRecord(name, _CODE_KINDS[code], bytes(view[pos:end])))
        pos = end
    return out, pos


def encode_entry(block_id: str, execution_index: int, values: Iterable[ValueRecord]) -> bytes:
    values = list(values)
    return b"".join(
        (
            _U8.pack(ENTRY_FORMAT_VERSION),
            _write_str(block_id),
            _U64.pack(execution_index),
            _U32.pack(len(values)),
            *_value_parts(values),
        )
    )


def decode_entry(payload: bytes, payload_digest: bytes | None = None) -> CheckpointEntry:
    view = memoryview(payload)
    try:
        (version,) = _U8.unpack_from(view, 0)
        if version != ENTRY_FORMAT_VERSION:
            raise CodecError(f"unsupported entry format {version}")
        block_id, pos = _read_str(view, 1)
        (index,) = _U64.unpack_from(view, pos)
        pos += _U64.size
        (count,) = _U32.unpack_from(view, pos)
        pos += _U32.size
        values, pos = _read_values(view, pos, count)
    except struct.error as exc:
        raise CodecError(f"truncated entry: {exc}") from exc
    if pos != len(view):
        raise CodecError("trailing bytes after entry")
    return CheckpointEntry(
        block_id,
        index,
        tuple(values),
        payload_digest if payload_digest is not None else digest(payload),
    )


def encode_values(values: Iterable[ValueRecord]) -> bytes:
    values = list(values)
    return _U32.pack(len(values)) + _write_values(values)


def decode_values(payload: bytes) -> list[ValueRecord]:
    return decode_map_records(payload)


# -- snapshots ----------------------------------------------------------------


def capture(value: Any) -> Any:
    """Copy ``value`` so later mutation by the caller cannot reach it.

    Arrays are copied, mappings are copied recursively and stateful objects
    are reduced to a copied ``state_dict()``.  Immutable scalars, strings,
    bytes and :class:`ValueRecord` instances are shared.
    """
    if isinstance(value, (ValueRecord, int, float, str, bytes, np.number)):
        return value
    if isinstance(value, np.ndarray):
        return value.copy()
    if isinstance(value, (bytearray, memoryview)):
        return bytes(value)
    if isinstance(value, Mapping):
        return {k: capture(v) for k, v in value.items()}
    state_dict = getattr(value, "state_dict", None)
    if callable(state_dict):
        return {k: capture(v) for k, v in state_dict().items()}
    return copy.deepcopy(value)


def payload_nbytes(value: Any) -> int:
    """Rough byte size of a captured value, used for cost accounting."""
    if isinstance(value, ValueRecord):
        return len(value.payload)
    if isinstance(value, np.ndarray):
        return value.nbytes
    if isinstance(value, (bytes, str)):
        return len(value)
    if isinstance(value, Mapping):
        return sum(payload_nbytes(v) for v in value.values())
    return 8
