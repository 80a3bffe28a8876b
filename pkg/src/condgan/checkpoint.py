"""Versioned binary container for named tensors: the CANV1 format.

Layout:

    bytes 0..5    magic ``CANV1\\n``
    bytes 6..13   little-endian uint64, header length H in bytes
    bytes 14..    UTF-8 canonical key=value header (H bytes)
    bytes 14+H..  payload: raw little-endian IEEE-754 arrays

The header carries arbitrary metadata plus an indexed tensor manifest::

    tensor.count=K
    tensor.<i>.name / .dtype (f4|f8) / .shape (comma ints) / .offset

Offsets are relative to the payload start; payload order follows manifest
index order. Round-trips are bit-exact: arrays are stored and restored via
their raw little-endian bytes. All file writes go through a
write-temp-then-rename so readers never observe partial files.
"""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from . import kvtext
from .errors import DataFormatError

MAGIC = b"CANV1\n"
_DTYPES = {"f4": "<f4", "f8": "<f8"}


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write a file atomically (temp file in the same directory, then rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise DataFormatError(f"container tensors must be float32/float64, got {arr.dtype}")


def write_container(path: str, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Serialize header metadata and named arrays to a CANV1 file."""
    entries: dict[str, object] = dict(header)
    entries["format.magic"] = "CANV1"
    entries["format.version"] = 1
    entries["tensor.count"] = len(tensors)
    payload_parts: list[bytes] = []
    offset = 0
    for i, (name, arr) in enumerate(tensors.items()):
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        entries[f"tensor.{i}.name"] = name
        entries[f"tensor.{i}.dtype"] = code
        entries[f"tensor.{i}.shape"] = ",".join(str(s) for s in arr.shape)
        entries[f"tensor.{i}.offset"] = offset
        payload_parts.append(raw)
        offset += len(raw)
    header_bytes = kvtext.dump(entries).encode("utf-8")
    blob = b"".join([
        MAGIC,
        len(header_bytes).to_bytes(8, "little"),
        header_bytes,
        *payload_parts,
    ])
    atomic_write_bytes(path, blob)


def read_container(path: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse a CANV1 file into (header kv, named arrays)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8:
        raise DataFormatError(f"{path}: truncated container, {len(blob)} bytes")
    if blob[: len(MAGIC)] != MAGIC:
        raise DataFormatError(
            f"{path}: bad magic, expected {MAGIC!r}, found {blob[:6]!r}"
        )
    header_len = int.from_bytes(blob[len(MAGIC): len(MAGIC) + 8], "little")
    header_start = len(MAGIC) + 8
    if len(blob) < header_start + header_len:
        raise DataFormatError(
            f"{path}: truncated header at byte {len(blob)}, "
            f"expected {header_start + header_len}"
        )
    header = kvtext.parse(blob[header_start: header_start + header_len].decode("utf-8"))
    payload = blob[header_start + header_len:]
    count = kvtext.get_int(header, "tensor.count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name = kvtext.get_str(header, f"tensor.{i}.name")
        code = kvtext.get_str(header, f"tensor.{i}.dtype")
        if code not in _DTYPES:
            raise DataFormatError(f"{path}: unknown tensor dtype {code!r}")
        shape = kvtext.get_ints(header, f"tensor.{i}.shape")
        offset = kvtext.get_int(header, f"tensor.{i}.offset")
        nbytes = math.prod(shape) * (4 if code == "f4" else 8)
        end = offset + nbytes
        if end > len(payload):
            raise DataFormatError(
                f"{path}: payload truncated at byte {header_start + header_len + len(payload)},"
                f" tensor {name!r} needs bytes up to {header_start + header_len + end}"
            )
        arr = np.frombuffer(payload[offset:end], dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = np.array(arr, copy=True)
    return header, tensors
