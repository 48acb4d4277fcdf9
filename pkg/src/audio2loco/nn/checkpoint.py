"""Parameter checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"A2LCKPT1"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header
    ...       tensor payloads, float64 little-endian, C order, concatenated

The header holds ``version``, ``seed``, free-form ``meta`` and a ``tensors``
list of ``{name, shape, offset}`` where ``offset`` counts bytes from the
start of the payload section.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..fileio import atomic_write_bytes

MAGIC = b"A2LCKPT1"
VERSION = 1


def encode_checkpoint(tensors, seed=None, meta=None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = {"version": VERSION, "seed": seed, "meta": meta or {}, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(data: bytes):
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return tensors, header


def save_checkpoint(path, tensors, seed=None, meta=None):
    atomic_write_bytes(path, encode_checkpoint(tensors, seed=seed, meta=meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
