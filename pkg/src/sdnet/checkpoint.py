"""Binary parameter checkpoints.

Layout (little-endian): the magic string ``SDN1`` followed by one record
per parameter: u32 name length, utf-8 name bytes, u32 rank, u32 per-axis
sizes, then the raw float64 values in C order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SDN1"


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Write named arrays; values are taken as float64 without conversion loss."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, value in params.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(value, dtype=np.float64, order="C")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic at byte 0: {blob[:4]!r}")
    params: dict[str, np.ndarray] = {}
    pos = 4
    total = len(blob)

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > total:
            raise DataError(f"{path}: truncated checkpoint reading {what} at byte {pos}")
        chunk = blob[pos : pos + nbytes]
        pos += nbytes
        return chunk

    while pos < total:
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "shape"))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * count, f"values of {name}"), dtype="<f8")
        params[name] = data.reshape(shape).copy()
    return params
