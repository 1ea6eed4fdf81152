"""Versioned binary container for named float64 tensors plus a JSON manifest.

Byte layout (all integers little-endian):

    magic   4 bytes  b"DDT1"
    u32     format version (currently 1)
    u64     manifest length in bytes
    ...     manifest: UTF-8 JSON object (sorted keys)
    u32     tensor count
    per tensor:
        u16     name length, then UTF-8 name
        u8      ndim
        u64*ndim  dims
        f64*prod(dims)  row-major little-endian payload

Used for checkpoints and generated datasets; writes are deterministic for
identical inputs.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError

MAGIC = b"DDT1"
VERSION = 1


def write_container(path, manifest, tensors):
    """tensors: mapping name -> numpy array (converted to float64)."""
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def read_container(path):
    """Returns (manifest dict, dict name -> float64 array)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ConfigError(f"{path}: not a tensor container")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported container version {version}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n_items), dtype="<f8").reshape(shape)
            tensors[name] = data.astype(np.float64)
        return manifest, tensors
