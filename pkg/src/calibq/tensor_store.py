"""Binary container for named dense tensors.

Layout (all integers little-endian)::

    magic      b"CLQB"
    version    u32
    count      u32   number of entries
    meta_len   u32   length of the UTF-8 JSON manifest that follows
    manifest   meta_len bytes
    table      count * ENTRY_SIZE bytes, entries sorted by name
    payloads   each starting on a 64-byte boundary, zero padded

Each table entry is fixed width: a 256-byte NUL-padded name, u8 dtype code,
u8 ndim, u16 reserved, four u32 dims (unused dims are 0), u64 offset and
u64 byte length. Offsets are absolute from the start of the file.

Payload bytes are stored verbatim; no dtype conversion happens on I/O.
"""

from __future__ import annotations

import io
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

MAGIC = b"CLQB"
FORMAT_VERSION = 1
ALIGN = 64
NAME_BYTES = 256
MAX_DIMS = 4

_HEADER = struct.Struct("<4sIII")
_ENTRY = struct.Struct(f"<{NAME_BYTES}sBBH{MAX_DIMS}IQQ")
ENTRY_SIZE = _ENTRY.size

_NAME_RE = re.compile(r"[A-Za-z0-9._/-]+")

DTYPE_CODES = {"f32": 1, "f16": 2, "u8": 3}
_CODE_TO_DTYPE = {v: k for k, v in DTYPE_CODES.items()}
_NP_DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2"), "u8": np.dtype("u1")}


class BundleError(ValueError):
    """Invalid bundle contents or malformed container bytes."""


class TruncatedBundleError(BundleError):
    pass


def dtype_name(arr: np.ndarray) -> str:
    for name, dt in _NP_DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return name
    raise BundleError(f"unsupported dtype {arr.dtype}; expected float32, float16 or uint8")


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not _NAME_RE.fullmatch(name):
        raise BundleError(f"invalid entry name {name!r}")
    if len(name.encode("ascii")) > NAME_BYTES:
        raise BundleError(f"entry name longer than {NAME_BYTES} bytes: {name!r}")


def _check_array(name: str, arr: np.ndarray) -> None:
    dtype_name(arr)
    if not 1 <= arr.ndim <= MAX_DIMS:
        raise BundleError(f"{name}: expected 1..{MAX_DIMS} dims, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise BundleError(f"{name}: all dims must be >= 1, got shape {arr.shape}")


@dataclass
class TensorBundle:
    """Named tensors plus a JSON-serializable manifest.

    ``entries`` maps names to numpy arrays of dtype float32, float16 or
    uint8. ``metadata`` is free-form creation metadata; it is serialized
    with sorted keys so identical bundles give identical bytes.
    """

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        entries, self.entries = self.entries, {}
        for name, arr in entries.items():
            self.add(name, arr)

    def add(self, name: str, arr: np.ndarray) -> None:
        _check_name(name)
        if name in self.entries:
            raise BundleError(f"duplicate entry name {name!r}")
        arr = np.asarray(arr)
        _check_array(name, arr)
        self.entries[name] = np.ascontiguousarray(arr, dtype=_NP_DTYPES[dtype_name(arr)])

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def validate(self) -> None:
        for name, arr in self.entries.items():
            _check_name(name)
            _check_array(name, arr)
            expected = int(np.prod(arr.shape)) * arr.dtype.itemsize
            if arr.nbytes != expected:
                raise BundleError(f"{name}: payload length {arr.nbytes} != {expected}")


@dataclass(frozen=True)
class LayerRecord:
    """Where one layer's tensors live inside a bundle.

    ``m`` is the input dimension (rows of W), ``n`` the output dimension.
    """

    layer_id: str
    weight_name: str
    m: int
    n: int
    gram_name: str | None = None
    activation_name: str | None = None

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise BundleError(f"layer {self.layer_id}: dims must be >= 1")
        if self.gram_name is not None and self.activation_name is not None:
            raise BundleError(f"layer {self.layer_id}: give either a gram or activations, not both")


def layer_records(bundle: TensorBundle) -> list[LayerRecord]:
    """Discover layers by the ``<layer>/W`` naming convention.

    A precomputed ``<layer>/gram`` wins over ``<layer>/acts`` when a bundle
    carries both.
    """
    records = []
    for name in bundle.names():
        if not name.endswith("/W"):
            continue
        layer = name[: -len("/W")]
        w = bundle[name]
        if w.ndim != 2:
            raise BundleError(f"{name}: weight must be 2-D, got shape {w.shape}")
        gram = f"{layer}/gram" if f"{layer}/gram" in bundle else None
        acts = f"{layer}/acts" if gram is None and f"{layer}/acts" in bundle else None
        records.append(LayerRecord(layer, name, w.shape[0], w.shape[1], gram, acts))
    return records


def _pad(n: int) -> int:
    return (-n) % ALIGN


def to_bytes(bundle: TensorBundle) -> bytes:
    bundle.validate()
    names = bundle.names()
    meta = json.dumps(bundle.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    table_end = _HEADER.size + len(meta) + ENTRY_SIZE * len(names)

    table = []
    payloads = []
    offset = table_end + _pad(table_end)
    for name in names:
        arr = bundle[name]
        data = arr.tobytes(order="C")
        dims = list(arr.shape) + [0] * (MAX_DIMS - arr.ndim)
        table.append(
            _ENTRY.pack(
                name.encode("ascii"), DTYPE_CODES[dtype_name(arr)], arr.ndim, 0,
                *dims, offset, len(data),
            )
        )
        payloads.append(data + b"\0" * _pad(len(data)))
        offset += len(data) + _pad(len(data))

    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(names), len(meta)))
    out.write(meta)
    out.write(b"".join(table))
    out.write(b"\0" * _pad(table_end))
    for p in payloads:
        out.write(p)
    return out.getvalue()


def from_bytes(buf: bytes) -> TensorBundle:
    if len(buf) < _HEADER.size:
        raise TruncatedBundleError("file shorter than header")
    magic, version, count, meta_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BundleError(f"bad magic {magic!r}")
    if version > FORMAT_VERSION:
        raise BundleError(f"bundle version {version} is newer than reader version {FORMAT_VERSION}")
    pos = _HEADER.size
    if len(buf) < pos + meta_len + count * ENTRY_SIZE:
        raise TruncatedBundleError("file truncated inside header or entry table")
    metadata = json.loads(buf[pos : pos + meta_len].decode("utf-8")) if meta_len else {}
    pos += meta_len

    bundle = TensorBundle(metadata=metadata)
    prev_end = pos + count * ENTRY_SIZE
    for _ in range(count):
        raw_name, code, ndim, _reserved, *rest = _ENTRY.unpack_from(buf, pos)
        pos += ENTRY_SIZE
        dims, offset, length = rest[:MAX_DIMS], rest[MAX_DIMS], rest[MAX_DIMS + 1]
        name = raw_name.rstrip(b"\0").decode("ascii")
        if code not in _CODE_TO_DTYPE:
            raise BundleError(f"{name}: unknown dtype code {code}")
        if not 1 <= ndim <= MAX_DIMS:
            raise BundleError(f"{name}: invalid ndim {ndim}")
        dt = _NP_DTYPES[_CODE_TO_DTYPE[code]]
        shape = tuple(dims[:ndim])
        if int(np.prod(shape)) * dt.itemsize != length:
            raise BundleError(f"{name}: shape {shape} does not match payload length {length}")
        if offset < prev_end:
            raise BundleError(f"{name}: overlapping or out-of-order payload offset")
        if offset + length > len(buf):
            raise TruncatedBundleError(f"payload of entry {name!r} is truncated")
        arr = np.frombuffer(buf, dtype=dt, count=length // dt.itemsize, offset=offset)
        bundle.add(name, arr.reshape(shape).copy())
        prev_end = offset + length
    return bundle


def write_bundle(bundle: TensorBundle, destination: str | os.PathLike | BinaryIO) -> int:
    """Serialize ``bundle``; returns the number of bytes written.

    Paths are written atomically through a temporary file in the same
    directory followed by a rename.
    """
    data = to_bytes(bundle)
    if hasattr(destination, "write"):
        destination.write(data)
        return len(data)
    path = os.fspath(destination)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".clqb-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def read_bundle(source: str | os.PathLike | BinaryIO | bytes) -> TensorBundle:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return from_bytes(bytes(source))
    if hasattr(source, "read"):
        return from_bytes(source.read())
    with open(source, "rb") as fh:
        return from_bytes(fh.read())
