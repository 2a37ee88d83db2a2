"""Flat name -> tensor checkpoint container.

Layout follows the open safetensors convention: an unsigned 64-bit
little-endian header length, a UTF-8 JSON header mapping tensor names to
``{"dtype", "shape", "data_offsets"}`` (offsets are relative to the start
of the payload), then the raw payload.  All payloads are little-endian
IEEE-754 single precision; the optional ``__metadata__`` entry carries
string key/value pairs.

Writes are deterministic: names are sorted, the JSON is emitted with
sorted keys and fixed separators, so identical state produces identical
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

_HEADER_LEN_FMT = "<Q"
_DTYPE_TAG = "F32"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray],
                 metadata: dict[str, str] | None = None) -> None:
    """Write ``tensors`` to ``path``, casting payloads to float32."""
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        entries[name] = {
            "dtype": _DTYPE_TAG,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        blobs.append(blob)
        offset += len(blob)
    if metadata:
        entries["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    header = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER_LEN_FMT, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a container back as ``(tensors, metadata)``.

    Raises :class:`CheckpointError` on truncation, bad JSON, unsupported
    dtypes, or payload-length mismatches.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    prefix = struct.calcsize(_HEADER_LEN_FMT)
    if len(raw) < prefix:
        raise CheckpointError(f"{path}: truncated container (no header length)")
    (header_len,) = struct.unpack_from(_HEADER_LEN_FMT, raw)
    if len(raw) < prefix + header_len:
        raise CheckpointError(f"{path}: truncated container (header cut short)")
    try:
        entries = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid container header: {exc}") from exc
    payload = raw[prefix + header_len:]
    metadata = {str(k): str(v) for k, v in entries.pop("__metadata__", {}).items()}
    tensors: dict[str, np.ndarray] = {}
    for name, entry in entries.items():
        if entry.get("dtype") != _DTYPE_TAG:
            raise CheckpointError(f"{path}: tensor '{name}' has unsupported dtype "
                                  f"{entry.get('dtype')!r} (only {_DTYPE_TAG})")
        shape = tuple(int(s) for s in entry["shape"])
        start, end = (int(v) for v in entry["data_offsets"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if end - start != expected:
            raise CheckpointError(f"{path}: tensor '{name}' payload is {end - start} "
                                  f"bytes, expected {expected} for shape {shape}")
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor '{name}' payload extends past end of file")
        tensors[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    expected_payload = max((int(e["data_offsets"][1]) for e in entries.values()), default=0)
    if len(payload) != expected_payload:
        raise CheckpointError(f"{path}: {len(payload) - expected_payload} trailing "
                              f"byte(s) after tensor payload")
    return tensors, metadata


def require_tensor(tensors: dict[str, np.ndarray], name: str,
                   shape: tuple[int, ...], source: str = "checkpoint") -> np.ndarray:
    """Fetch ``name`` from a loaded container, enforcing its shape."""
    if name not in tensors:
        raise CheckpointError(f"{source}: missing tensor '{name}'")
    arr = tensors[name]
    if tuple(arr.shape) != tuple(shape):
        raise CheckpointError(f"{source}: tensor '{name}' has shape {tuple(arr.shape)}, "
                              f"expected {tuple(shape)}")
    return arr
