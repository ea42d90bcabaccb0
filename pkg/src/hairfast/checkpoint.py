"""Named-tensor checkpoint container.

Layout (all integers little-endian):

    bytes 0..4   magic ``HFCK1``
    bytes 5..6   uint16 format version (currently 1)
    bytes 7..14  uint64 header length in bytes
    header       UTF-8 JSON: {"fingerprint": str, "meta": {...},
                 "tensors": {name: {"dtype": "<f4"|"<i8"|"|u1",
                                    "shape": [...], "offset": int}}}
    payload      raw tensor bytes at the stated offsets

The file is loadable with json + numpy alone; nothing in it is executed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"HFCK1"
VERSION = 1
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1"}


def save_container(path, tensors: dict[str, np.ndarray], fingerprint: str, meta: dict | None = None):
    path = Path(path)
    header_tensors = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")
        dtype = arr.dtype.newbyteorder("<").str if arr.dtype.byteorder != "|" else arr.dtype.str
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        blob = arr.astype(dtype).tobytes()
        header_tensors[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"fingerprint": fingerprint, "meta": meta or {}, "tensors": header_tensors},
        sort_keys=True,
    ).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_container(path) -> tuple[dict[str, np.ndarray], str, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an HFCK1 container")
    (version,) = struct.unpack_from("<H", raw, 5)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 7)
    header_start = 15
    try:
        header = json.loads(raw[header_start : header_start + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    payload = raw[header_start + header_len :]
    tensors = {}
    for name, info in header["tensors"].items():
        dt = np.dtype(info["dtype"])
        count = int(np.prod(info["shape"], dtype=np.int64)) if info["shape"] else 1
        start = info["offset"]
        end = start + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} runs past end of file")
        tensors[name] = np.frombuffer(payload[start:end], dtype=dt).reshape(info["shape"]).copy()
    return tensors, header["fingerprint"], header.get("meta", {})


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_to_tensors(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module's state dict under ``prefix/`` as float arrays."""
    out = {}
    for key, value in module.state_dict().items():
        out[f"{prefix}/{key}"] = value.detach().cpu().numpy()
    return out


def tensors_to_state(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str):
    """Load every ``prefix/``-keyed array into the module (strict)."""
    want = module.state_dict()
    state = {}
    for key, ref in want.items():
        full = f"{prefix}/{key}"
        if full not in tensors:
            raise CheckpointError(f"missing tensor {full!r} in checkpoint")
        arr = tensors[full]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"tensor {full!r} has shape {tuple(arr.shape)}, module expects {tuple(ref.shape)}"
            )
        state[key] = torch.as_tensor(arr, dtype=ref.dtype)
    module.load_state_dict(state)
