"""Binary checkpoint container shared by every trainable component.

Layout: magic ``ECLP1``, a little-endian uint64 header length, a UTF-8 JSON
header mapping tensor name to dtype/shape/offset, then the raw tensor
payloads (row-major, little-endian), offsets relative to the end of the
header. The reserved ``__meta__`` header entry carries JSON metadata
(configs, vocabularies); names starting with ``__`` are never tensors.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

from .errors import EditkitError

MAGIC = b"ECLP1"

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.int32: "int32",
}
_NP_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}
_TORCH_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
}


class CheckpointError(EditkitError):
    pass


def _payload(t: torch.Tensor) -> bytes:
    name = _DTYPES.get(t.dtype)
    if name is None:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    arr = t.detach().cpu().contiguous().numpy().astype(_NP_DTYPES[name], copy=False)
    return arr.tobytes(order="C")


def save_tensors(
    path: str | Path,
    tensors: Mapping[str, torch.Tensor],
    meta: dict | None = None,
) -> None:
    header: Dict[str, object] = {}
    if meta is not None:
        header["__meta__"] = meta
    blobs = []
    offset = 0
    for name in sorted(tensors):
        if name.startswith("__"):
            raise CheckpointError(f"tensor name {name!r} uses the reserved __ prefix")
        t = tensors[name]
        blob = _payload(t)
        header[name] = {
            "dtype": _DTYPES[t.dtype],
            "shape": list(t.shape),
            "offset": offset,
        }
        blobs.append(blob)
        offset += len(blob)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_tensors(path: str | Path) -> Tuple[Dict[str, torch.Tensor], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not an ECLP1 checkpoint")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    meta = header.pop("__meta__", {})
    tensors: Dict[str, torch.Tensor] = {}
    for name, info in header.items():
        np_dtype = _NP_DTYPES[info["dtype"]]
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = info["offset"]
        arr = np.frombuffer(payload, dtype=np_dtype, count=count, offset=start)
        tensors[name] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[info["dtype"]]).reshape(shape)
    return tensors, meta


def sha256_of(tensors: Mapping[str, torch.Tensor]) -> str:
    """Stable digest of a named tensor set (names sorted, raw payload bytes)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(_payload(tensors[name]))
    return h.hexdigest()
