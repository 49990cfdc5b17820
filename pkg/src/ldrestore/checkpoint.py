"""Binary checkpoint container.

Layout: magic "LDRS", u32 little-endian format version, u64 little-endian
header length, JSON header (UTF-8, sorted keys, compact separators), then
the raw float64 little-endian payload of every tensor in header order.

The header carries kind ("base" or "lora"), the network/schedule/meta dicts,
and a "tensors" list of {name, shape} describing the payload. Writing the
same state twice produces byte-identical files.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC = b"LDRS"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    kind: str
    config: dict
    schedule: dict
    meta: dict
    arrays: dict  # name -> float64 ndarray, insertion order = file order


def save_checkpoint(path, kind: str, config: dict, schedule: dict, named_arrays, meta: dict):
    """named_arrays: iterable of (name, ndarray); order defines the payload."""
    entries = []
    blobs = []
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        entries.append({"name": str(name), "shape": list(arr.shape)})
        blobs.append(arr.astype("<f8").tobytes())
    header = {
        "kind": kind,
        "config": config,
        "schedule": schedule,
        "meta": meta,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", offset=0)
    if len(buf) < 16:
        raise FormatError("truncated checkpoint preamble", offset=len(buf))
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    hlen = struct.unpack_from("<Q", buf, 8)[0]
    pos = 16
    if len(buf) < pos + hlen:
        raise FormatError("truncated checkpoint header", offset=len(buf))
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}", offset=pos) from None
    pos += hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(buf) < pos + nbytes:
            raise FormatError(
                f"truncated payload for tensor {entry['name']!r}", offset=len(buf)
            )
        arrays[entry["name"]] = (
            np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        )
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after payload", offset=pos)
    return Checkpoint(
        version=version,
        kind=header["kind"],
        config=header.get("config", {}),
        schedule=header.get("schedule", {}),
        meta=header.get("meta", {}),
        arrays=arrays,
    )
