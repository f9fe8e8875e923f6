"""Parameter checkpoint container.

Layout::

    b"MADT-CKPT-1\n"
    uint64 LE   header length in bytes
    header      UTF-8 JSON: {"hyperparameters": {...}, "params": [{"name", "shape", "offset"}...]}
    payload     concatenated little-endian float64 arrays, offsets relative to payload start
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MADT-CKPT-1\n"


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray], hyperparameters: Mapping) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"hyperparameters": dict(hyperparameters), "params": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: missing magic {MAGIC!r}")
    pos = len(MAGIC)
    try:
        (hlen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        header = json.loads(raw[pos:pos + hlen].decode())
        payload = memoryview(raw)[pos + hlen:]
        params = {}
        for e in header["params"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
            params[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
        return header["hyperparameters"], params
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt checkpoint ({exc})") from None
