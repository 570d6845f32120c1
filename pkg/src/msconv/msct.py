"""MSCT tensor files and name=filename manifests.

Binary layout: magic ``MSCT``, little-endian u32 rank, u32 per dimension,
then the values as little-endian IEEE-754 float32, row-major.  Readers
reject anything with the wrong magic or whose byte length disagrees with
the header.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MSCT"


class FormatError(ValueError):
    """Corrupt or mismatched MSCT file or manifest."""


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim < 1:
        arr = arr.reshape(1)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_bytes(arr))


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    body = 8 + 4 * rank
    if len(blob) < body:
        raise FormatError("truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = 1
    for d in dims:
        count *= d
    expected = body + 4 * count
    if len(blob) != expected:
        raise FormatError(f"payload length {len(blob)} != expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=body, count=count)
    return data.reshape(dims).copy()


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def write_manifest(path: str | os.PathLike, entries: dict[str, str]) -> None:
    with open(path, "w", encoding="ascii") as f:
        for name, filename in entries.items():
            f.write(f"{name}={filename}\n")


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    entries: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected name=filename")
            name, filename = line.split("=", 1)
            entries[name] = filename
    return entries


def save_tensors(directory: str | os.PathLike, tensors: dict[str, np.ndarray],
                 manifest_name: str = "manifest.txt") -> None:
    """Write one .msct per tensor plus a manifest, names sorted for stable bytes."""
    os.makedirs(directory, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        filename = name.replace("/", "_").replace(".", "_") + ".msct"
        write_tensor(os.path.join(directory, filename), tensors[name])
        entries[name] = filename
    write_manifest(os.path.join(directory, manifest_name), entries)


def load_tensors(directory: str | os.PathLike,
                 manifest_name: str = "manifest.txt") -> dict[str, np.ndarray]:
    entries = read_manifest(os.path.join(directory, manifest_name))
    return {name: read_tensor(os.path.join(directory, fn)) for name, fn in entries.items()}
