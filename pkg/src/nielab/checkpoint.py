"""Parameter checkpoints: one binary file per model.

Layout: a single JSON line (parameter names, shapes, byte offsets into the
payload), a newline, then the concatenated little-endian float64 buffers.
"""

import json

import numpy as np

from .engine import DTensor


def save_params(params, path, meta=None):
    """Write an ordered {name: DTensor} mapping to one checkpoint file."""
    entries = []
    offset = 0
    blobs = []
    for name, p in params.items():
        data = p.data if isinstance(p, DTensor) else np.asarray(p, dtype=np.float64)
        blob = np.ascontiguousarray(data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"params": entries}
    if meta:
        header["meta"] = meta
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_params(path):
    """Read a checkpoint; returns ({name: DTensor}, meta dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    payload = raw[nl + 1:]
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        params[entry["name"]] = DTensor(arr.reshape(shape).astype(np.float64))
    return params, header.get("meta", {})
