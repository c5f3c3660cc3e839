"""
mixedprefix.autodiff.checkpoint

Container layout:

    b"MXPK" | u32 little-endian header length | header JSON (utf-8) | payload

The header lists format version, global nonlinearity, free-form metadata and,
per tensor, name, shape, storage dtype ("<f8" or "<f4"), byte offset into the
payload and byte count. Payloads are raw little-endian arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from mixedprefix.autodiff.graph import Tensor
from mixedprefix.config import get_settings
from mixedprefix.errors import CheckpointError
from mixedprefix.utils.files import atomic_write_bytes

MAGIC = b"MXPK"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)
    nonlinearity: str = "gelu"
    storage: str = "float64"

    def namespace(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under `prefix/`, with the prefix stripped."""
        head = prefix.rstrip("/") + "/"
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}


def encode_checkpoint(
    tensors: Mapping[str, Union[np.ndarray, Tensor]],
    metadata: Optional[Mapping[str, Any]] = None,
    storage: str = "float64",
    nonlinearity: Optional[str] = None,
) -> bytes:
    if storage not in _DTYPES:
        raise CheckpointError(f"unsupported storage precision '{storage}'")
    dtype = _DTYPES[storage]
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        value = tensors[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "nonlinearity": nonlinearity or get_settings().MIXEDPREFIX_NONLINEARITY,
        "storage": storage,
        "metadata": dict(metadata or {}),
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (head_len,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + head_len].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}", {"header": header})
    payload = memoryview(blob)[8 + head_len :]
    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"payload for '{entry['name']}' is truncated")
        arr = np.frombuffer(payload[start : start + n], dtype=entry["dtype"]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64)
    return Checkpoint(tensors, header.get("metadata", {}), header.get("nonlinearity", "gelu"), header.get("storage", "float64"))


def save_checkpoint(
    path: Path,
    tensors: Mapping[str, Union[np.ndarray, Tensor]],
    metadata: Optional[Mapping[str, Any]] = None,
    storage: str = "float64",
    nonlinearity: Optional[str] = None,
) -> Path:
    return atomic_write_bytes(Path(path), encode_checkpoint(tensors, metadata, storage, nonlinearity))


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
