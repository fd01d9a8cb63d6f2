"""Binary checkpoints: magic, integer header fields, then named float64 tensors."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamStore


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def save_checkpoint(path, magic: bytes, dims: dict[str, int], params: ParamStore) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    out = [magic, struct.pack("<I", len(dims))]
    for key, val in dims.items():
        out += [_pack_str(key), struct.pack("<q", int(val))]
    out.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        out += [_pack_str(name), struct.pack("<B", arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape),
                np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, magic: bytes) -> tuple[dict[str, int], ParamStore]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    off = 4

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, raw, off)
        off += struct.calcsize(fmt)
        return vals

    def take_str():
        nonlocal off
        (length,) = take("<H")
        s = raw[off:off + length].decode("utf-8")
        off += length
        return s

    try:
        (n_dims,) = take("<I")
        dims = {}
        for _ in range(n_dims):
            key = take_str()
            dims[key] = take("<q")[0]
        (n_tensors,) = take("<I")
        tensors = {}
        for _ in range(n_tensors):
            name = take_str()
            (ndim,) = take("<B")
            shape = take(f"<{ndim}I")
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
            off += 8 * count
            tensors[name] = arr.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return dims, ParamStore(tensors)
