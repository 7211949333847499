"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"WLDM"  u32 version  u32 entry_count
    entry_count x { u32 name_len, name (utf-8), u32 rank, rank x u32 dims, f32 payload }
    u32 crc32 of every preceding byte

Text metadata (configs) is stored as an entry of byte values, see
:func:`text_entry` / :func:`entry_text`.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"WLDM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")  # tobytes() is C order; keeps rank 0
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a WLDM checkpoint (bad magic)")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    pos, end = 12, len(blob) - 4
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise CheckpointError("truncated entry table")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        if name in out:
            raise CheckpointError(f"duplicate entry name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != end:
        raise CheckpointError(f"{end - pos} trailing bytes after the last entry")
    return out


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(entries))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def entry_text(values: np.ndarray) -> str:
    return np.asarray(values).astype(np.uint8).tobytes().decode("utf-8")


def with_prefix(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def strip_prefix(prefix: str, entries: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = prefix + "."
    return {k[len(head) :]: v for k, v in entries.items() if k.startswith(head)}
