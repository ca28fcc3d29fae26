"""Binary checkpoint format.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"ATXF"
    4       4     u32 format version (1)
    8       32    sha256 of the canonical config JSON
    40      8     u64 body length in bytes
    48      32    sha256 of the body
    80      ...   body

    body := str(config_json) str(metadata_json) table(params)
            opt_table(ema) opt_optimizer
    str := u32 length, UTF-8 bytes
    table := u32 count, count * entry
    entry := u16 name length, UTF-8 name, u8 ndim, ndim * u64 dims,
             8 * prod(dims) bytes of f64 payload
    opt_table := u8 present, [table]
    opt_optimizer := u8 present, [u64 step, table(m), table(v)]

Every failure mode raises its own exception class so callers can tell a
foreign file from a damaged one.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DigestMismatchError,
    GeometryError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .vit import ViTConfig, ViTParams

MAGIC = b"ATXF"
VERSION = 1
HEADER = struct.Struct("<4sI32sQ32s")
_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    config: ViTConfig
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    ema: dict[str, np.ndarray] | None = None
    optimizer_step: int | None = None
    optimizer_m: dict[str, np.ndarray] | None = None
    optimizer_v: dict[str, np.ndarray] | None = None

    def to_params(self, requires_grad: bool = True) -> ViTParams:
        return ViTParams.from_arrays(self.config, self.params, requires_grad=requires_grad)

    def ema_params(self) -> ViTParams:
        if self.ema is None:
            raise ValueError("checkpoint carries no EMA weights")
        return ViTParams.from_arrays(self.config, self.ema)


def config_json(cfg: ViTConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_digest(cfg: ViTConfig) -> str:
    return hashlib.sha256(config_json(cfg)).hexdigest()


# ----------------------------------------------------------------------
# encoding
# ----------------------------------------------------------------------
def _put_str(buf: io.BytesIO, s: bytes) -> None:
    buf.write(struct.pack("<I", len(s)))
    buf.write(s)


def _put_table(buf: io.BytesIO, table: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            raise TypeError(f"tensor {name!r} has dtype {arr.dtype}; checkpoints store float64 only")
        nm = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nm)))
        buf.write(nm)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_F64).tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    body = io.BytesIO()
    cfg_bytes = config_json(ckpt.config)
    _put_str(body, cfg_bytes)
    _put_str(body, json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8"))
    _put_table(body, ckpt.params)
    body.write(struct.pack("<B", ckpt.ema is not None))
    if ckpt.ema is not None:
        _put_table(body, ckpt.ema)
    has_opt = ckpt.optimizer_m is not None
    body.write(struct.pack("<B", has_opt))
    if has_opt:
        body.write(struct.pack("<Q", ckpt.optimizer_step or 0))
        _put_table(body, ckpt.optimizer_m)
        _put_table(body, ckpt.optimizer_v)
    payload = body.getvalue()
    header = HEADER.pack(MAGIC, VERSION, hashlib.sha256(cfg_bytes).digest(), len(payload),
                         hashlib.sha256(payload).digest())
    return header + payload


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    """Write atomically (temp file + rename); returns the body digest (hex)."""
    data = encode_checkpoint(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return data[48:80].hex()


# ----------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------
class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint body ends early at byte {self.pos + HEADER.size}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}Q") if ndim else ()
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(8 * n), dtype=_F64).astype(np.float64).reshape(shape)
        return out


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"not an ATXF checkpoint (magic {data[:4]!r})")
    if len(data) < HEADER.size:
        raise TruncatedCheckpointError(f"header needs {HEADER.size} bytes, file has {len(data)}")
    _, version, cfg_digest, body_len, body_digest = HEADER.unpack(data[: HEADER.size])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this reader supports {VERSION}")
    body = data[HEADER.size :]
    if len(body) < body_len:
        raise TruncatedCheckpointError(f"body is {len(body)} bytes, header promises {body_len}")
    if len(body) > body_len:
        raise DigestMismatchError(f"{len(body) - body_len} unexpected trailing bytes")
    if hashlib.sha256(body).digest() != body_digest:
        raise DigestMismatchError("body sha256 does not match header digest")
    r = _Reader(body)
    cfg_bytes = r.string()
    if hashlib.sha256(cfg_bytes).digest() != cfg_digest:
        raise DigestMismatchError("config sha256 does not match header config digest")
    cfg = ViTConfig.from_dict(json.loads(cfg_bytes))
    meta = json.loads(r.string())
    params = r.table()
    ema = r.table() if r.unpack("<B")[0] else None
    step = m = v = None
    if r.unpack("<B")[0]:
        (step,) = r.unpack("<Q")
        m, v = r.table(), r.table()
    return Checkpoint(cfg, params, meta, ema, step, m, v)


def check_config(expected: ViTConfig, actual: ViTConfig) -> None:
    for name, want in expected.to_dict().items():
        got = getattr(actual, name)
        if got != want:
            raise GeometryError(name, want, got)


def load_checkpoint(path: str | Path, expected_config: ViTConfig | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected_config is not None:
        check_config(expected_config, ckpt.config)
    # table shapes must agree with the config; from_arrays raises otherwise
    ckpt.to_params()
    return ckpt


def checkpoint_digest(path: str | Path) -> str:
    with open(path, "rb") as f:
        head = f.read(HEADER.size)
    if len(head) < HEADER.size or head[:4] != MAGIC:
        raise BadMagicError(f"{path} is not an ATXF checkpoint")
    return head[48:80].hex()
