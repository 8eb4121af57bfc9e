"""Self-describing float64 table files.

Layout: one magic line, one JSON header line, then the raw little-endian
float64 payload in row-major order. Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"ROPE-TABLE v1\n"


def write_table(path, header: dict, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    header = dict(header, shape=list(values.shape))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(values.tobytes())


def read_table(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != MAGIC:
            raise ValueError(f"{path}: not a table file (bad magic {magic[:20]!r})")
        header = json.loads(fh.readline())
        payload = fh.read()
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    shape = tuple(header.pop("shape"))
    if int(np.prod(shape)) != values.size:
        raise ValueError(f"{path}: header shape {shape} does not match {values.size} values")
    return header, values.reshape(shape)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
