"""Checkpoint container shared by model and preconditioner-state files.

Layout (documented here and covered by roundtrip tests):

    line 1: ``DPKFAC1 <kind>``  (ASCII)
    line 2: JSON header: {"meta": {...}, "arrays": [{"name", "shape"}, ...]}
    then:   for each listed array, its float64 entries, row-major,
            little-endian, back to back.

Writes are atomic: a temp file in the target directory is renamed over the
destination only after a successful write.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

MAGIC = "DPKFAC1"


def atomic_write_bytes(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
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


def write_container(path: str, kind: str, meta: dict, arrays: dict[str, np.ndarray]):
    header = {
        "meta": meta,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    parts = [f"{MAGIC} {kind}\n".encode(), (json.dumps(header) + "\n").encode()]
    for v in arrays.values():
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_container(path: str):
    """Returns (kind, meta, arrays)."""
    with open(path, "rb") as f:
        first = f.readline().decode("utf-8").rstrip("\n")
        if not first.startswith(MAGIC + " "):
            raise ValueError(f"{path}: not a {MAGIC} container")
        kind = first[len(MAGIC) + 1 :]
        header = json.loads(f.readline().decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return kind, header["meta"], arrays
