"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DHENCKPT"                 magic
    u32 version                 currently 1
    u32 flags                   bit 0: tensors stored as float32 (lossy)
    u64 n + n bytes             header JSON (config, step, cursor, seeds, serving heads)
    u32 count                   number of tensor records
    per record:
        u8  section             b"P" parameter, b"B" buffer, b"M"/b"V" Adam moments
        u16 n + n bytes         UTF-8 name
        u8  dtype               0 float64, 1 float32
        u8  rank, u32 * rank    shape
        u64 n + n bytes         row-major payload
    32 bytes                    sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DHENCKPT"
VERSION = 1
FLAG_FLOAT32 = 1
SECTIONS = (b"P", b"B", b"M", b"V")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    float32: bool = False

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))


def encode(ck: Checkpoint) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, FLAG_FLOAT32 if ck.float32 else 0)
    head = json.dumps(ck.header, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<Q", len(head)) + head
    records = []
    for tag, group in zip(SECTIONS, (ck.params, ck.buffers, ck.adam_m, ck.adam_v)):
        for name in sorted(group):
            records.append((tag, name, group[name]))
    out += struct.pack("<I", len(records))
    code = 1 if ck.float32 else 0
    for tag, name, arr in records:
        arr = np.ascontiguousarray(np.asarray(arr, dtype=_DTYPES[code]))
        nb = name.encode()
        out += tag + struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload = arr.tobytes()
        out += struct.pack("<Q", len(payload)) + payload
    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated (payload length check failed)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if len(buf) < len(MAGIC) + 8 + 32:
        raise CheckpointError("checkpoint is truncated (payload length check failed)")
    version, flags = struct.unpack("<II", buf[8:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity check failed: file is truncated or corrupted")
    r = _Reader(body)
    r.take(16)
    try:
        (hlen,) = r.unpack("<Q")
        header = json.loads(r.take(hlen).decode())
        (count,) = r.unpack("<I")
        groups: dict[bytes, dict] = {t: {} for t in SECTIONS}
        for _ in range(count):
            tag = r.take(1)
            if tag not in groups:
                raise CheckpointError(f"unknown section tag {tag!r}")
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode()
            code, rank = r.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype tag {code}")
            shape = r.unpack(f"<{rank}I")
            (plen,) = r.unpack("<Q")
            dt = _DTYPES[code]
            if plen != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
                raise CheckpointError(f"payload length of {name!r} does not match its shape")
            arr = np.frombuffer(r.take(plen), dtype=dt).reshape(shape).astype(np.float64)
            groups[tag][name] = arr
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    return Checkpoint(header, groups[b"P"], groups[b"B"], groups[b"M"], groups[b"V"],
                      bool(flags & FLAG_FLOAT32))


def save(ck: Checkpoint, path: str | Path) -> str:
    """Write atomically; returns the sha256 hex digest of the file."""
    data = encode(ck)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    return decode(data)


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
