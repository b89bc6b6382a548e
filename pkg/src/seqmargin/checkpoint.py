"""Versioned binary checkpoint container shared by both model families.

Layout (all integers little-endian):

    magic   4 bytes  b"SQMG"
    version u32      format version (currently 1)
    tag     u16 len + utf-8 bytes    model kind ("ed" / "ee")
    vocab   u16 len + utf-8 bytes    vocabulary content hash (hex)
    meta    u32 count, then per entry: u16 len + utf-8 key, i64 value
    tensors u32 count, then per tensor:
            u16 len + utf-8 name, u8 ndim, u32 dims..., float64 data

Tensors are written in declaration order and loading refuses a vocabulary
hash mismatch, so a checkpoint can never silently pair with a foreign vocab.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SQMG"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tag: str
    vocab_hash: str
    meta: dict[str, int]
    tensors: dict[str, np.ndarray]  # insertion order == declaration order


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<H", fh.read(2))
    return fh.read(n).decode("utf-8")


def save_checkpoint(path, tag: str, vocab_hash: str, meta: dict[str, int],
                    tensors: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        _write_str(fh, tag)
        _write_str(fh, vocab_hash)
        fh.write(struct.pack("<I", len(meta)))
        for key in meta:
            _write_str(fh, key)
            fh.write(struct.pack("<q", int(meta[key])))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr, dtype=np.float64)
            _write_str(fh, name)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        tag = _read_str(fh)
        vocab_hash = _read_str(fh)
        if expected_vocab_hash is not None and vocab_hash != expected_vocab_hash:
            raise CheckpointError(
                f"{path}: vocabulary hash mismatch "
                f"(checkpoint {vocab_hash[:12]}..., corpus {expected_vocab_hash[:12]}...)")
        (n_meta,) = struct.unpack("<I", fh.read(4))
        meta: dict[str, int] = {}
        for _ in range(n_meta):
            key = _read_str(fh)
            (meta[key],) = struct.unpack("<q", fh.read(8))
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
            tensors[name] = data.reshape(shape)
        return Checkpoint(tag, vocab_hash, meta, tensors)
