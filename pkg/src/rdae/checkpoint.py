"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"RDAE" | version | config_len | config (UTF-8 JSON) | record_count |
    record* | crc32

    record = name_len | name (UTF-8) | rank | extent* | float32 LE values

Records hold every trainable parameter followed by batch-norm running
statistics (``<layer>.stats.mean``, ``.var`` and ``.tracked``). The trailing
CRC-32 covers every preceding byte.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .model import Model, ModelConfig, build

MAGIC = b"RDAE"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _records(model: Model):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, st in model.named_stats():
        yield f"{name}.mean", st.mean
        yield f"{name}.var", st.var
        yield f"{name}.tracked", np.array([st.tracked], dtype=np.float32)


def to_bytes(model: Model) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    records = list(_records(model))
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(cfg)), cfg, _U32.pack(len(records))]
    for name, arr in records:
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, only {self.end - self.pos} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def _parse(buf: bytes, end: int):
    r = _Reader(buf, end)
    r.take(8)
    cfg = json.loads(r.take(r.u32()).decode("utf-8"))
    records = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        records[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return cfg, records, r.pos


def _expected_length(buf: bytes) -> int | None:
    """Total file length implied by the config blob, or None if it cannot be read.

    A config blob running past the end of the buffer counts as truncation.
    """
    cfg_len = _U32.unpack(buf[8:12])[0]
    if 12 + cfg_len > len(buf):
        return 12 + cfg_len + 8
    try:
        cfg = ModelConfig.from_dict(json.loads(buf[12 : 12 + cfg_len].decode("utf-8")))
        model = build(cfg, 0)
    except Exception:
        return None
    total = 12 + cfg_len + 4 + 4
    for name, arr in _records(model):
        total += 4 + len(name.encode("utf-8")) + 4 + 4 * arr.ndim + 4 * arr.size
    return total


def from_bytes(buf: bytes) -> Model:
    if len(buf) < 8:
        raise TruncatedCheckpointError(f"checkpoint truncated: only {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version = _U32.unpack(buf[4:8])[0]
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    if len(buf) < 12:
        raise TruncatedCheckpointError(f"checkpoint truncated: only {len(buf)} bytes")
    stored = _U32.unpack(buf[-4:])[0]
    computed = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if computed != stored:
        # tell a short file apart from a corrupted one by the length its header implies
        expected = _expected_length(buf)
        if expected is not None and len(buf) < expected:
            raise TruncatedCheckpointError(f"checkpoint truncated: {len(buf)} bytes, header implies {expected}")
        raise ChecksumError(f"checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")
    try:
        cfg, records, end = _parse(buf, len(buf) - 4)
    except TruncatedCheckpointError:
        raise
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if end != len(buf) - 4:
        raise CheckpointError(f"{len(buf) - 4 - end} unexpected bytes before the checksum")

    model = build(ModelConfig.from_dict(cfg), 0)
    expected = dict(_records(model))
    if set(expected) != set(records):
        missing = sorted(set(expected) - set(records))
        extra = sorted(set(records) - set(expected))
        raise CheckpointError(f"record set mismatch; missing {missing[:3]}, unexpected {extra[:3]}")
    for name, arr in records.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"record {name!r} has shape {arr.shape}, config implies {expected[name].shape}")
    for name, p in model.named_parameters():
        p.data = records[name].copy()
        p.m = np.zeros_like(p.data)
        p.v = np.zeros_like(p.data)
    for name, st in model.named_stats():
        st.mean = records[f"{name}.mean"].copy()
        st.var = records[f"{name}.var"].copy()
        st.tracked = int(records[f"{name}.tracked"][0])
    # loaded weights are for inference; batch norm must use the stored statistics
    return model.eval()


def save_checkpoint(model: Model, path) -> None:
    data = to_bytes(model)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
