"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ANOM" | u32 version | 32-byte config SHA-256 | u32 entry count
    entries: u16 name length, name (utf-8), u8 dtype code, u8 ndim,
             ndim × u64 shape, u64 payload offset, u64 payload bytes
    payloads (offsets relative to the first payload byte)
    u32 CRC32 of every preceding byte

The same container stores model state and exported image sets.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from anomem.autodiff import Tensor
from anomem.config import ExperimentConfig
from anomem.data import LabeledImageSet
from anomem.detect import ScaleHead
from anomem.encoder import EncoderState, encoder_init
from anomem.errors import FormatError, ValidationError
from anomem.memory import HopfieldMemory

MAGIC = b"ANOM"
VERSION = 1
HASH_BYTES = 32
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}
_CONFIG_KEY = "__config__"


class ConfigMismatchWarning(UserWarning):
    """A checkpoint was written under a different configuration."""


def _code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt.kind == "f":
        return 0
    if dt.kind in "iu" and dt != np.uint8:
        return 1
    if dt == np.uint8:
        return 2
    raise ValidationError(f"unsupported dtype {arr.dtype}")


def encode_container(arrays: dict[str, np.ndarray], config_hash: bytes = bytes(HASH_BYTES)) -> bytes:
    """Serialize named arrays; the output depends only on names, values and hash."""
    if len(config_hash) != HASH_BYTES:
        raise ValidationError(f"config hash must be {HASH_BYTES} bytes")
    table, payloads, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        if code == 0 and not np.all(np.isfinite(arr)):
            raise ValidationError(f"tensor {name!r} holds non-finite values")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        key = name.encode()
        table.append(struct.pack("<H", len(key)) + key)
        table.append(struct.pack("<BB", code, arr.ndim))
        table.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        table.append(struct.pack("<QQ", offset, len(raw)))
        payloads.append(raw)
        offset += len(raw)
    body = MAGIC + struct.pack("<I", VERSION) + bytes(config_hash)
    body += struct.pack("<I", len(arrays)) + b"".join(table) + b"".join(payloads)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(buf: bytes) -> tuple[dict[str, np.ndarray], bytes]:
    """Parse a container; returns ``(arrays, config_hash)``."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an AnoMem container", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", 4)
    config_hash = r.take(HASH_BYTES, "config hash")
    (count,) = r.unpack("<I", "entry count")
    entries = []
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<H", "entry name length")
        try:
            name = r.take(n, "entry name").decode()
        except UnicodeDecodeError:
            raise FormatError("entry name is not utf-8", start) from None
        code, ndim = r.unpack("<BB", "entry dtype")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", start)
        shape = r.unpack(f"<{ndim}Q", "entry shape")
        off, nbytes = r.unpack("<QQ", "entry offset")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize:
            raise FormatError(f"entry {name!r} size disagrees with its shape", start)
        entries.append((name, code, shape, off, nbytes, start))
    base = r.pos
    crc_at = len(buf) - 4
    if crc_at < base:
        raise FormatError("truncated before payloads", len(buf))
    payload_len = crc_at - base
    (stored,) = struct.unpack("<I", buf[crc_at:])
    arrays = {}
    for name, code, shape, off, nbytes, start in entries:
        if off + nbytes > payload_len:
            raise FormatError(f"payload of {name!r} runs past the end of the file", base + off)
        raw = buf[base + off : base + off + nbytes]
        arrays[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
    if zlib.crc32(buf[:crc_at]) != stored:
        raise FormatError("checksum mismatch, file is corrupt", crc_at)
    return arrays, config_hash


def save_container(path, arrays: dict[str, np.ndarray], config_hash: bytes = bytes(HASH_BYTES)) -> None:
    Path(path).write_bytes(encode_container(arrays, config_hash))


def load_container(path, expected_hash: bytes | None = None) -> tuple[dict[str, np.ndarray], bytes]:
    arrays, got = decode_container(Path(path).read_bytes())
    if expected_hash is not None and got != expected_hash:
        warnings.warn(
            f"{path}: checkpoint was written under a different config (hash {got.hex()[:12]})",
            ConfigMismatchWarning,
            stacklevel=2,
        )
    return arrays, got


# ----------------------------------------------------------------------
# model state
# ----------------------------------------------------------------------


@dataclass
class ModelState:
    config: ExperimentConfig
    encoder: EncoderState
    memories: list[HopfieldMemory]
    heads: list[ScaleHead] = field(default_factory=list)
    optimizer: list[np.ndarray] = field(default_factory=list)


def model_arrays(state: ModelState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {
        _CONFIG_KEY: np.frombuffer(state.config.to_json().encode(), dtype=np.uint8)
    }
    for name, p in state.encoder.named_parameters().items():
        arrays[name] = p.data
    for s, m in enumerate(state.memories):
        arrays[f"memory.{s}.weights"] = m.weights.data
        arrays[f"memory.{s}.hparams"] = np.array([m.beta, m.max_iters, m.tol])
    for s, h in enumerate(state.heads):
        arrays[f"head.{s}.grid"] = np.array([h.grid], dtype=np.int64)
        for part in ("w1", "b1", "w2", "b2"):
            arrays[f"head.{s}.{part}"] = getattr(h, part).data
        if h.shift is not None:
            arrays[f"head.{s}.shift"] = h.shift
            arrays[f"head.{s}.scale"] = h.scale
    for i, v in enumerate(state.optimizer):
        arrays[f"optim.velocity.{i}"] = v
    return arrays


def save_model(path, state: ModelState) -> None:
    save_container(path, model_arrays(state), state.config.hash())


def _need(arrays: dict, key: str) -> np.ndarray:
    if key not in arrays:
        raise FormatError(f"checkpoint lacks entry {key!r}")
    return arrays[key]


def load_model(path, config: ExperimentConfig | None = None) -> ModelState:
    """Rebuild a model; ``config`` (if given) is only compared against the stored hash."""
    arrays, _ = load_container(path, None if config is None else config.hash())
    raw = bytes(_need(arrays, _CONFIG_KEY))
    try:
        stored = ExperimentConfig.from_dict(json.loads(raw.decode()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"stored config is unreadable: {exc}") from exc
    encoder = encoder_init(stored.encoder, 0)
    for name, p in encoder.named_parameters().items():
        value = _need(arrays, name)
        if value.shape != p.data.shape:
            raise FormatError(f"{name}: stored shape {value.shape} != {p.data.shape}")
        p.data = value.astype(np.float64)
    memories, s = [], 0
    while f"memory.{s}.weights" in arrays:
        beta, iters, tol = _need(arrays, f"memory.{s}.hparams")
        w = Tensor(arrays[f"memory.{s}.weights"], requires_grad=True)
        memories.append(HopfieldMemory(w, float(beta), int(iters), float(tol)))
        s += 1
    heads, s = [], 0
    while f"head.{s}.w1" in arrays:
        parts = [Tensor(arrays[f"head.{s}.{k}"], requires_grad=True) for k in ("w1", "b1", "w2", "b2")]
        head = ScaleHead(int(_need(arrays, f"head.{s}.grid")[0]), *parts)
        if f"head.{s}.shift" in arrays:
            head.shift, head.scale = arrays[f"head.{s}.shift"], _need(arrays, f"head.{s}.scale")
        heads.append(head)
        s += 1
    optimizer, i = [], 0
    while f"optim.velocity.{i}" in arrays:
        optimizer.append(arrays[f"optim.velocity.{i}"])
        i += 1
    return ModelState(stored, encoder, memories, heads, optimizer)


# ----------------------------------------------------------------------
# image sets
# ----------------------------------------------------------------------


def save_dataset(path, data: LabeledImageSet) -> None:
    save_container(
        path,
        {
            "images": data.images,
            "labels": np.asarray(data.labels, dtype=np.int64),
            "class_ids": np.asarray(data.class_ids, dtype=np.int64),
        },
    )


def load_dataset(path) -> LabeledImageSet:
    arrays, _ = load_container(path)
    return LabeledImageSet(
        _need(arrays, "images"), _need(arrays, "labels"), _need(arrays, "class_ids")
    )
