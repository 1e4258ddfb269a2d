"""Binary checkpoints and tensor dumps.

Layout (all integers little-endian)::

    b"R2N1" | u32 version | u32 spec_len | spec_len bytes UTF-8 JSON
    u32 n_tensors | n_tensors records

    record = u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims | f32 payload

A tensor dump is ``u32 n_tensors`` followed by records, with no magic or spec.
Loads are all-or-nothing: the whole file is parsed and validated before any
model tensor is touched.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import ModelSpec, R2NetToy

MAGIC = b"R2N1"
VERSION = 1


class CheckpointError(Exception):
    """Base class; ``kind`` is a stable machine-readable tag."""

    kind = "checkpoint"

    def __str__(self) -> str:
        return f"{self.kind}: {super().__str__()}"


class BadMagicError(CheckpointError):
    kind = "bad_magic"


class VersionMismatchError(CheckpointError):
    kind = "version_mismatch"


class TruncatedError(CheckpointError):
    kind = "truncated"


class ShapeMismatchError(CheckpointError):
    kind = "shape_mismatch"

    def __init__(self, name: str, expected, got):
        self.name, self.expected, self.got = name, tuple(expected), tuple(got)
        super().__init__(f"parameter {name!r}: expected shape {self.expected}, got {self.got}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{what} needs {n} bytes at offset {self.pos}, "
                                 f"only {len(self.buf) - self.pos} remain")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def encode_records(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr)
        if a.ndim > 0xFF:
            raise ValueError(f"rank {a.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_records(r: _Reader) -> dict[str, np.ndarray]:
    (n,) = r.unpack("<I", "tensor count")
    out = {}
    for i in range(n):
        (ln,) = r.unpack("<H", f"name length of record {i}")
        name = r.take(ln, f"name of record {i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * count, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return out


OPTIM_PREFIX = "optim/"


def save_checkpoint(path, model: R2NetToy, metadata: dict | None = None,
                    optimizer_state: dict[str, np.ndarray] | None = None) -> None:
    """Write spec, metadata, every model tensor (delta and BN buffers included) and optimizer slots."""
    blob = {"model": json.loads(model.spec.to_json()), "meta": metadata or {}}
    spec = json.dumps(blob, sort_keys=True).encode("utf-8")
    tensors = model.state_dict()
    for k, v in (optimizer_state or {}).items():
        tensors[OPTIM_PREFIX + k] = v
    body = MAGIC + struct.pack("<II", VERSION, len(spec)) + spec + encode_records(tensors)
    Path(path).write_bytes(body)


def split_optimizer_state(tensors: dict[str, np.ndarray]) -> tuple[dict, dict]:
    model = {k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX)}
    optim = {k[len(OPTIM_PREFIX):]: v for k, v in tensors.items() if k.startswith(OPTIM_PREFIX)}
    return model, optim


def read_checkpoint(path) -> tuple[ModelSpec, dict, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint without building a model.

    The returned tensor dict still contains any ``optim/`` records.
    """
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, found {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {VERSION}")
    (ln,) = r.unpack("<I", "spec length")
    blob = json.loads(r.take(ln, "spec blob").decode("utf-8"))
    tensors = decode_records(r)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after last record")
    return ModelSpec.from_json(json.dumps(blob["model"])), blob.get("meta", {}), tensors


def load_into(model: R2NetToy, tensors: dict[str, np.ndarray]) -> None:
    own = dict(model.named_tensors())
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if missing or extra:
        raise CheckpointError(f"tensor names differ: missing={missing} unexpected={extra}")
    for name, t in own.items():
        if tuple(tensors[name].shape) != t.shape:
            raise ShapeMismatchError(name, t.shape, tensors[name].shape)
    model.load_state_dict(tensors)


def load_checkpoint(path, spec: ModelSpec | None = None) -> tuple[R2NetToy, dict]:
    """Rebuild the model (from ``spec`` if given, else the stored one) and fill its tensors."""
    stored, meta, tensors = read_checkpoint(path)
    tensors, _ = split_optimizer_state(tensors)
    model = R2NetToy(spec or stored)
    load_into(model, tensors)
    model.eval()
    return model, meta


def save_dump(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_records(tensors))


def load_dump(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    out = decode_records(r)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after last record")
    return out
