"""Tensor blobs, CSV and JSON writers with deterministic output bytes."""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BKT1"


class FormatError(ValueError):
    pass


def pack_tensors(header: dict, tensors: dict) -> bytes:
    """``MAGIC | uint32 header length | JSON header | float32 LE data``.

    The header gets a ``tensors`` list of ``{name, shape, offset}`` with
    offsets counted in float32 elements from the start of the data block.
    """
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.reshape(-1).tobytes())
        offset += a.size
    head = json.dumps({**header, "tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def unpack_tensors(data: bytes):
    if data[:4] != MAGIC:
        raise FormatError("not a tensor file (bad magic)")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n].decode("utf-8"))
    flat = np.frombuffer(data[8 + n:], dtype="<f4")
    tensors = {}
    for e in header.pop("tensors"):
        size = int(np.prod(e["shape"], dtype=int))
        chunk = flat[e["offset"]:e["offset"] + size]
        if chunk.size != size:
            raise FormatError(f"tensor {e['name']!r} is truncated")
        tensors[e["name"]] = chunk.astype(float).reshape(e["shape"])
    return header, tensors


def save_tensors(path, header: dict, tensors: dict):
    Path(path).write_bytes(pack_tensors(header, tensors))


def load_tensors(path):
    return unpack_tensors(Path(path).read_bytes())


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
