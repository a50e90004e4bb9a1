"""Tensor containers: safetensors and a raw manifest + flat binary format.

safetensors layout: an 8-byte little-endian header length N, N bytes of
UTF-8 JSON mapping each tensor name to ``{"dtype", "shape",
"data_offsets": [begin, end]}`` (offsets relative to the end of the
header, optional ``__metadata__`` entry), then the little-endian payload.

The raw format is a JSON manifest (``"format": "neural-reserve-raw"``)
naming a sibling binary file and giving each tensor's dtype, shape, byte
offset and byte length within it.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

RAW_FORMAT = "neural-reserve-raw"

_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "I16": np.dtype("<i2"),
    "I8": np.dtype("i1"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}
_CODES = {np.dtype(v).newbyteorder("<"): k for k, v in _DTYPES.items() if k != "BF16"}


class ContainerError(ValueError):
    """Malformed or truncated tensor container."""


def _dtype_code(arr: np.ndarray) -> str:
    try:
        return _CODES[arr.dtype.newbyteorder("<")]
    except KeyError:
        raise ContainerError(f"unsupported dtype {arr.dtype}") from None


def _decode(buf, dtype_code: str, shape, name: str) -> np.ndarray:
    if dtype_code not in _DTYPES:
        raise ContainerError(f"tensor {name!r}: unsupported dtype {dtype_code!r}")
    dt = _DTYPES[dtype_code]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(buf) != count * dt.itemsize:
        raise ContainerError(
            f"tensor {name!r}: {len(buf)} bytes for shape {list(shape)} {dtype_code}"
        )
    arr = np.frombuffer(buf, dtype=dt, count=count)
    if dtype_code == "BF16":
        arr = (arr.astype(np.uint32) << 16).view(np.float32)
    else:
        arr = arr.astype(dt.newbyteorder("="), copy=True)
    return arr.reshape(shape)


def read_safetensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, metadata)`` from a safetensors file."""
    path = Path(path)
    size = path.stat().st_size
    if size < 8:
        raise ContainerError(f"{path}: file too short for a header")
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        if n > size - 8:
            raise ContainerError(f"{path}: header length {n} exceeds file size")
        try:
            header = json.loads(fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError(f"{path}: header is not a JSON object")
    payload_len = size - 8 - n
    raw = np.memmap(path, dtype=np.uint8, mode="r", offset=8 + n) if payload_len else b""
    metadata = header.pop("__metadata__", None) or {}
    tensors = {}
    for name, info in header.items():
        try:
            begin, end = info["data_offsets"]
            dtype_code, shape = info["dtype"], list(info["shape"])
        except (KeyError, TypeError, ValueError):
            raise ContainerError(f"tensor {name!r}: malformed header entry") from None
        if not 0 <= begin <= end <= payload_len:
            raise ContainerError(f"tensor {name!r}: data offsets outside payload (truncated file?)")
        tensors[name] = _decode(bytes(raw[begin:end]), dtype_code, shape, name)
    return tensors, metadata


def write_safetensors(path, tensors: dict, metadata: dict | None = None) -> None:
    header = {}
    offset = 0
    ordered = sorted(tensors)
    for name in ordered:
        arr = np.asarray(tensors[name])
        nbytes = arr.size * arr.dtype.itemsize
        header[name] = {
            "dtype": _dtype_code(arr),
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in ordered:
            arr = np.ascontiguousarray(tensors[name])
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_raw(manifest_path) -> tuple[dict, dict]:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{manifest_path}: unreadable manifest: {exc}") from None
    if manifest.get("format") != RAW_FORMAT:
        raise ContainerError(f"{manifest_path}: not a {RAW_FORMAT} manifest")
    data_path = manifest_path.parent / manifest["data"]
    blob = data_path.read_bytes()
    tensors = {}
    for name, info in manifest["tensors"].items():
        start, nbytes = info["offset"], info["nbytes"]
        if start < 0 or start + nbytes > len(blob):
            raise ContainerError(f"tensor {name!r}: extends past end of {data_path.name}")
        tensors[name] = _decode(blob[start:start + nbytes], info["dtype"], info["shape"], name)
    return tensors, manifest.get("metadata", {})


def write_raw(manifest_path, tensors: dict, metadata: dict | None = None) -> None:
    manifest_path = Path(manifest_path)
    data_name = manifest_path.with_suffix(".bin").name
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        buf = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {"dtype": _dtype_code(arr), "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(buf)}
        chunks.append(buf)
        offset += len(buf)
    (manifest_path.parent / data_name).write_bytes(b"".join(chunks))
    manifest = {"format": RAW_FORMAT, "version": 1, "data": data_name,
                "tensors": entries, "metadata": metadata or {}}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def read_container(path) -> tuple[dict, dict]:
    """Dispatch on extension: ``.json`` is a raw manifest, anything else safetensors."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if str(path).endswith(".json"):
        return read_raw(path)
    return read_safetensors(path)
