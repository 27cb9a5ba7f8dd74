"""Self-describing binary container for named arrays.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header (entry table + user metadata), then the raw little-endian array
bytes. No timestamps anywhere: identical content yields identical bytes,
so reruns produce byte-identical checkpoints and episode files.
"""

import json

import numpy as np

MAGIC = b"CAPREG\x00\x01"
VERSION = 1

__all__ = ["write_container", "read_container", "ContainerError", "VERSION"]


class ContainerError(ValueError):
    """Malformed, truncated, or version-incompatible container file."""


_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1"}


def write_container(path, arrays, meta=None):
    """Write named arrays plus a JSON-serializable ``meta`` dict."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        code = arr.dtype.str if arr.dtype.str != "|u1" else "|u1"
        if code not in _DTYPES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"entries": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path):
    """Read a container; returns (arrays dict, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not a capreg container")
    pos = len(MAGIC)
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=pos)[0])
    if version != VERSION:
        raise ContainerError(f"{path}: container version {version} != {VERSION}")
    pos += 4
    hlen = int(np.frombuffer(blob, dtype="<u8", count=1, offset=pos)[0])
    pos += 8
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})")
    data_start = pos + hlen
    arrays = {}
    for entry in header["entries"]:
        start = data_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise ContainerError(f"{path}: truncated entry {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
