"""Binary tensor container (``KFT1``).

Layout, all integers little-endian::

    b"KFT1"                 magic
    u32                     entry count
    per entry:
      u16                   name length in bytes
      bytes                 UTF-8 name
      u8                    dtype code (0 = float64)
      u8                    rank
      u64 * rank            dims
      bytes                 payload, 8 * prod(dims) bytes, little-endian f64

JSON metadata travels as an ordinary float64 vector of UTF-8 byte values
under the reserved name ``__meta__``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from kfade.curvature import CurvatureState
from kfade.model import Checkpoint, Network

MAGIC = b"KFT1"
DTYPE_F64 = 0
META_NAME = "__meta__"


class ContainerError(ValueError):
    pass


def encode(entries: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    items = list(entries.items())
    if meta is not None:
        if META_NAME in entries:
            raise ContainerError(f"{META_NAME!r} is reserved for metadata")
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        items.append((META_NAME, np.frombuffer(blob, dtype=np.uint8).astype(np.float64)))
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ContainerError("entry names must be unique")
    out = [MAGIC, struct.pack("<I", len(items))]
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ContainerError(f"entry {name!r} too large for the container format")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated container")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("not a KFT1 container (bad magic)")
    (count,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2))
        if dtype != DTYPE_F64:
            raise ContainerError(f"entry {name!r}: unknown dtype code {dtype}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(8 * size)), dtype="<f8").astype(np.float64)
        if name in entries:
            raise ContainerError(f"duplicate entry {name!r}")
        entries[name] = arr.reshape(dims)
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after the last entry")
    meta = None
    if META_NAME in entries:
        meta = json.loads(bytes(entries.pop(META_NAME).astype(np.uint8)).decode("utf-8"))
    return entries, meta


def write(path: str | Path, entries: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(encode(entries, meta))


def read(path: str | Path) -> tuple[dict[str, np.ndarray], dict | None]:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# typed helpers


def save_checkpoint(path: str | Path, ckpt: Checkpoint, net: Network | None = None) -> None:
    meta = {"artifact": "checkpoint", "layers": ckpt.names, "meta": _jsonable(ckpt.meta)}
    if net is not None:
        meta["network"] = net.to_dict()
    write(path, {f"{n}/W": ckpt[n] for n in ckpt.names}, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    entries, meta = read(path)
    if not meta or meta.get("artifact") != "checkpoint":
        raise ContainerError(f"{path} does not hold a checkpoint")
    return Checkpoint({n: entries[f"{n}/W"] for n in meta["layers"]}, meta.get("meta", {}))


def save_curvature(path: str | Path, state: CurvatureState) -> None:
    entries, meta = state.to_entries()
    write(path, entries, {**meta, "artifact": "curvature"})


def load_curvature(path: str | Path) -> CurvatureState:
    entries, meta = read(path)
    if not meta or meta.get("artifact") != "curvature":
        raise ContainerError(f"{path} does not hold curvature factors")
    return CurvatureState.from_entries(entries, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
