"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"SKPCKPT\\x00"
    u32       format version
    u32       header length, u32 header CRC-32
    bytes     header: UTF-8 JSON (mode, model config, train config, epoch, adam step)
    u32       blob count
    blobs     u16 name length, name, u32 rows, u32 cols, rows*cols float64
    u32       CRC-32 of the blob section

Blob names: ``param/<name>``, ``adam.m/<name>``, ``adam.v/<name>``.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ModeMismatchError
from .network import ModelConfig, ModelParams, param_shapes

MAGIC = b"SKPCKPT\x00"
FORMAT_VERSION = 1


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> AdamState:
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.tensors.items()},
            v={n: np.zeros_like(t.data) for n, t in params.tensors.items()},
        )


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    train_config: dict | None = None
    epoch: int = 0

    @property
    def mode(self) -> str:
        return self.params.mode


def _blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    key = name.encode("utf-8")
    return struct.pack("<H", len(key)) + key + struct.pack("<II", *arr.shape) + arr.tobytes()


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    params = ckpt.params
    header = {
        "format_version": FORMAT_VERSION,
        "mode": params.mode,
        "model": params.config.to_dict(),
        "train": ckpt.train_config,
        "epoch": int(ckpt.epoch),
        "adam_step": int(ckpt.adam.step),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = []
    for name, t in params.tensors.items():
        blobs.append(_blob(f"param/{name}", t.data))
    for name in params.names():
        blobs.append(_blob(f"adam.m/{name}", ckpt.adam.m[name]))
        blobs.append(_blob(f"adam.v/{name}", ckpt.adam.v[name]))
    body = struct.pack("<I", len(blobs)) + b"".join(blobs)
    return b"".join([
        MAGIC,
        struct.pack("<III", FORMAT_VERSION, len(head), zlib.crc32(head)),
        head,
        body,
        struct.pack("<I", zlib.crc32(body)),
    ])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically so an aborted run leaves the previous file intact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_checkpoint(ckpt))
    os.replace(tmp, path)


def _read(buf: io.BytesIO, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def loads_checkpoint(raw: bytes, expect_mode: str | None = None) -> Checkpoint:
    buf = io.BytesIO(raw)
    if _read(buf, len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, head_len, head_crc = struct.unpack("<III", _read(buf, 12, "header prefix"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    head = _read(buf, head_len, "header")
    if zlib.crc32(head) != head_crc:
        raise CheckpointError("checkpoint header checksum mismatch")
    try:
        header = json.loads(head.decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model"])
        mode = header["mode"]
        shapes = param_shapes(cfg, mode)
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"unparseable checkpoint header: {exc}") from exc
    if expect_mode is not None and mode != expect_mode:
        raise ModeMismatchError(f"checkpoint was trained for {mode!r}, cannot be used for {expect_mode!r}")

    body_start = buf.tell()
    (count,) = struct.unpack("<I", _read(buf, 4, "blob count"))
    blobs: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", _read(buf, 2, f"blob {i} name length"))
        name = _read(buf, name_len, f"blob {i} name").decode("utf-8", errors="replace")
        rows, cols = struct.unpack("<II", _read(buf, 8, f"blob {name!r} shape"))
        data = _read(buf, rows * cols * 8, f"blob {name!r} data")
        blobs[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(rows, cols)
    body_end = buf.tell()
    (body_crc,) = struct.unpack("<I", _read(buf, 4, "blob checksum"))
    if zlib.crc32(raw[body_start:body_end]) != body_crc:
        raise CheckpointError("checkpoint blob checksum mismatch")
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")

    arrays, m, v = {}, {}, {}
    for name, shape in shapes.items():
        for prefix, dest in (("param/", arrays), ("adam.m/", m), ("adam.v/", v)):
            key = prefix + name
            if key not in blobs:
                raise CheckpointError(f"checkpoint is missing blob {key!r}")
            if blobs[key].shape != shape:
                raise CheckpointError(f"blob {key!r} has shape {blobs[key].shape}, expected {shape}")
            dest[name] = blobs.pop(key)
    if blobs:
        raise CheckpointError(f"unexpected blobs {sorted(blobs)[:3]}")
    params = ModelParams(cfg, mode, arrays)
    adam = AdamState(m, v, int(header.get("adam_step", 0)))
    return Checkpoint(params, adam, header.get("train"), int(header.get("epoch", 0)))


def load_checkpoint(path, expect_mode: str | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(raw, expect_mode)
