"""Binary checkpoint format for model weights.

Layout (all integers little-endian u32 unless noted):

    magic   b"TKSE"
    body:
        version            (currently 1)
        config_len, config  canonical JSON (sorted keys, compact separators)
        n_tensors
        per tensor, sorted by name:
            name_len, name  UTF-8
            dtype tag       u8, 0 = float32
            rank, dims...
            raw data        float32 little-endian, C order
    crc32(body)            u32

Weights are stored as float32 regardless of the in-memory dtype; training
runs in float32, so a save/load round trip reproduces the same bytes and
the same parameters bit for bit.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"TKSE"
VERSION = 1
_DTYPE_F32 = 0


def _pack_u32(v):
    return struct.pack("<I", v)


def serialize_checkpoint(config, tensors):
    """Build the checkpoint byte string from a JSON-able config and a
    {name: ndarray} mapping."""
    body = bytearray()
    body += _pack_u32(VERSION)
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body += _pack_u32(len(cfg))
    body += cfg
    names = sorted(tensors)
    if len(names) != len(tensors):
        raise CheckpointError("duplicate tensor names")
    body += _pack_u32(len(names))
    for name in names:
        arr = np.asarray(tensors[name]).astype("<f4", copy=False)
        nb = name.encode("utf-8")
        body += _pack_u32(len(nb))
        body += nb
        body += struct.pack("<B", _DTYPE_F32)
        body += _pack_u32(arr.ndim)
        for d in arr.shape:
            body += _pack_u32(d)
        body += arr.tobytes(order="C")
    return MAGIC + bytes(body) + _pack_u32(zlib.crc32(bytes(body)) & 0xFFFFFFFF)


def save_checkpoint(path, config, tensors):
    with open(path, "wb") as fh:
        fh.write(serialize_checkpoint(config, tensors))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]


def load_checkpoint(path):
    """Read a checkpoint; returns (config, {name: float32 ndarray})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    body, (crc_stored,) = raw[len(MAGIC) : -4], struct.unpack("<I", raw[-4:])
    crc = zlib.crc32(body) & 0xFFFFFFFF
    if crc != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch (stored {crc_stored:#010x}, computed {crc:#010x})")
    r = _Reader(body, path)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (supported: {VERSION})")
    cfg_len = r.u32("config length")
    try:
        config = json.loads(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from exc
    n = r.u32("tensor count")
    tensors = {}
    for i in range(n):
        name_len = r.u32(f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        tag = r.u8(f"{name}: dtype tag")
        if tag != _DTYPE_F32:
            raise CheckpointError(f"{path}: {name}: unknown dtype tag {tag}")
        rank = r.u32(f"{name}: rank")
        shape = tuple(r.u32(f"{name}: dim {d}") for d in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = r.take(count * 4, f"{name}: data")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes after last tensor")
    return config, tensors
