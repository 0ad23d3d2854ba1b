"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"PEGEQAT1"                       8-byte magic
    uint32 version
    uint32 n, n bytes                 JSON descriptor (sorted keys, compact)
    uint32 count                      number of arrays, then per array:
        uint16 n, n bytes             UTF-8 name
        uint8 ndim, ndim * uint32     shape
        prod(shape) * float32         data

Writing is a pure function of the descriptor and the arrays, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, FormatError

MAGIC = b"PEGEQAT1"
VERSION = 1


@dataclass
class Checkpoint:
    descriptor: dict
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION

    @property
    def model_descriptor(self) -> dict:
        return self.descriptor.get("model", {})

    @property
    def step(self) -> int:
        return int(self.descriptor.get("step", 0))


def to_bytes(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ck.version))
    desc = json.dumps(ck.descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<I", len(ck.arrays)))
    for name, arr in ck.arrays.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{source}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    (dlen,) = r.unpack("<I")
    try:
        descriptor = json.loads(r.take(dlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt descriptor ({exc})") from exc
    if not isinstance(descriptor, dict):
        raise FormatError(f"{source}: descriptor is not an object")
    (count,) = r.unpack("<I")
    arrays = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: corrupt array name") from exc
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(descriptor, arrays, version)


def write_checkpoint(ck: Checkpoint, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ck))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    return from_bytes(raw, path)


def make_checkpoint(model, step: int = 0, seed: int = 0, optimizer=None, extra: dict | None = None) -> Checkpoint:
    arrays = OrderedDict(model.state_arrays())
    desc = {"model": model.spec.descriptor(), "step": int(step), "seed": int(seed)}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        desc["optimizer"] = type(optimizer).__name__
    if extra:
        desc.update(extra)
    return Checkpoint(desc, arrays)


def save_checkpoint(model, state: dict | None, path: str) -> Checkpoint:
    """Write ``model`` plus run ``state`` (step, seed, optimizer, extra)."""
    state = state or {}
    ck = make_checkpoint(model, state.get("step", 0), state.get("seed", 0), state.get("optimizer"), state.get("extra"))
    write_checkpoint(ck, path)
    return ck


def check_compatible(model, ck: Checkpoint) -> None:
    got = ck.model_descriptor
    want = model.spec.descriptor()
    for key in ("arch", "width", "classes", "in_shape"):
        if got.get(key) != want[key]:
            raise CheckpointError(f"checkpoint {key}={got.get(key)!r} but model has {want[key]!r}")


def apply_checkpoint(model, ck: Checkpoint, optimizer=None) -> None:
    check_compatible(model, ck)
    model.load_state_arrays(ck.arrays)
    if optimizer is not None:
        optimizer.load_state_arrays(ck.arrays)
