"""Binary checkpoints: "SPCN" magic, versioned, little-endian throughout.

Layout: magic, u32 version, length-prefixed UTF-8 config block of key=value
lines, u32 tensor count, then per tensor a length-prefixed name, u32 rank,
u64 extents, and float32 values.  Parameters are stored in 32 bits (adequate
for inference at half the file size); optimizer moments ride along as
reserved "adam." tensors when present.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .optim import AdamState, ParamSet
from .tensor import Tensor

MAGIC = b"SPCN"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamSet
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION


# -- config block -----------------------------------------------------------

def _encode_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


_TUPLE_INT_FIELDS = {"upsample_factors"}
_BOOL_FIELDS = {"use_aggregation"}


def _decode_field(name: str, text: str, py_type):
    if name in _TUPLE_INT_FIELDS:
        return tuple(int(v) for v in text.split(",") if v)
    if name in _BOOL_FIELDS:
        return text == "True"
    if py_type is int:
        return int(text)
    if py_type is float:
        return float(text)
    return text


def _config_block(ckpt: Checkpoint) -> bytes:
    lines = [f"{f.name}={_encode_value(getattr(ckpt.config, f.name))}"
             for f in dataclass_fields(ModelConfig)]
    lines.append(f"has_adam={ckpt.adam is not None}")
    if ckpt.adam is not None:
        lines.append(f"adam.t={ckpt.adam.t}")
    for key in sorted(ckpt.meta):
        lines.append(f"meta.{key}={ckpt.meta[key]}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config_block(blob: bytes) -> tuple[ModelConfig, dict, dict]:
    entries = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        entries[key] = value
    kwargs = {}
    for f in dataclass_fields(ModelConfig):
        if f.name in entries:
            kwargs[f.name] = _decode_field(f.name, entries[f.name], type(f.default))
    config = ModelConfig(**kwargs)
    meta = {k[5:]: v for k, v in entries.items() if k.startswith("meta.")}
    extras = {k: v for k, v in entries.items() if k in ("has_adam", "adam.t")}
    return config, meta, extras


# -- binary io ----------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = list(ckpt.params)
    tensors: list[tuple[str, np.ndarray]] = [(n, ckpt.params[n].data) for n in names]
    if ckpt.adam is not None:
        for n in names:
            tensors.append((f"adam.m.{n}", ckpt.adam.m[n]))
        for n in names:
            tensors.append((f"adam.v.{n}", ckpt.adam.v[n]))
    blob = _config_block(ckpt)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, data in tensors:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} at offset {self.offset}"
            )
        out = self.blob[self.offset:self.offset + count]
        self.offset += count
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {version} at offset 4"
        )
    config_len = r.u32("config length")
    config, meta, extras = _parse_config_block(r.take(config_len, "config block"))
    count = r.u32("tensor count")
    raw: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        rank = r.u32("rank")
        shape = tuple(r.u64("extent") for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(4 * size, f"values of {name}"), dtype="<f4")
        raw[name] = values.astype(np.float64).reshape(shape)
    if r.offset != len(blob):
        raise CheckpointError(
            f"{path}: {len(blob) - r.offset} trailing bytes at offset {r.offset}"
        )

    params: ParamSet = {
        n: Tensor(a, requires_grad=True) for n, a in raw.items() if not n.startswith("adam.")
    }
    adam = None
    if extras.get("has_adam") == "True":
        adam = AdamState(
            m={n: raw[f"adam.m.{n}"] for n in params},
            v={n: raw[f"adam.v.{n}"] for n in params},
            t=int(extras.get("adam.t", "0")),
        )
    return Checkpoint(config=config, params=params, adam=adam, meta=meta, version=version)
