"""Self-describing binary checkpoint files.

Layout (all integers little-endian)::

    b"AMXCKPT\\0"                 8-byte magic
    u32 version
    u32 metadata length, then UTF-8 JSON metadata
    u32 array count, then for each array (sorted by name):
        u16 name length, name bytes (UTF-8)
        u8  ndim, ndim x u64 extents
        float64 little-endian values, row-major
    32-byte SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, VersionMismatch
from .model import HyperParams

MAGIC = b"AMXCKPT\x00"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    hyper: HyperParams
    params: dict
    n_items: int
    vocab_digest: str
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _metadata(ckpt: Checkpoint) -> dict:
    return {
        "hyper": ckpt.hyper.to_dict(),
        "n_items": ckpt.n_items,
        "vocab_digest": ckpt.vocab_digest,
        "meta": ckpt.meta,
    }


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(_metadata(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(encoded), arr.ndim) + encoded)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 8 + _DIGEST or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("not a checkpoint file or truncated header")
    version, meta_len = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("content hash mismatch (truncated or modified file)")
    try:
        pos = len(MAGIC) + 8
        meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", body, pos)
            pos += 3
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(body):
            raise CorruptCheckpoint("trailing bytes after arrays")
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint body: {exc}") from None
    return Checkpoint(HyperParams(**meta["hyper"]), params, meta["n_items"], meta["vocab_digest"], meta["meta"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
