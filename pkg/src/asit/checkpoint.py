"""Named-tensor container used for checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"ASITCKPT"
    version      u32       FORMAT_VERSION
    header_len   u32       length of the UTF-8 JSON header that follows
    header       bytes     JSON object (run config, step, epoch, ...)
    n_tensors    u32
    n_tensors x:
        name_len u16, name (UTF-8)
        dtype    u8        see DTYPES
        ndim     u8, then ndim x u64 shape
        nbytes   u64, then row-major payload
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"ASITCKPT"
FORMAT_VERSION = 1

DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<i4"),
    4: np.dtype("u1"),
    5: np.dtype("?"),
}
_CODES = {dt: code for code, dt in DTYPES.items()}


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if arr.dtype not in _CODES:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    return arr


def save_tensors(path, tensors: dict, header: dict | None = None) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    head = json.dumps(header or {}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = _as_numpy(value)
            code = _CODES[arr.dtype]
            raw_name = name.encode()
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = arr.tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, header)``; tensors are numpy arrays in file order."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    try:
        if data[:8] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, head_len = struct.unpack_from("<II", data, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        header = json.loads(data[off : off + head_len].decode())
        off += head_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode()
            off += name_len
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", data, off)
            off += 8
            dtype = DTYPES[code]
            if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)) or off + nbytes > len(data):
                raise CheckpointError(f"{path}: tensor {name!r} payload is damaged")
            tensors[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: damaged checkpoint ({exc})") from exc
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return tensors, header


def module_tensors(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict, prefix: str) -> None:
    state = {k[len(prefix) + 1 :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix + ".")}
    expected = module.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint/model mismatch under {prefix!r}: missing={missing[:5]} unexpected={unexpected[:5]}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise CheckpointError(f"shape mismatch for {prefix}.{k}: {tuple(v.shape)} vs {tuple(expected[k].shape)}")
    module.load_state_dict(state)
