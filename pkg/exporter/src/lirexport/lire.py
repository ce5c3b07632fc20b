"""Writer for the LIRE energy-file contract.

Layout (little-endian): magic "LIRE", version u16 = 1, flags u16
(bit0: dist labels present, bit1: class labels present), n u64, l u64,
n*l f64 row-major, then n u8 dist labels (0 = ID, 1 = OoD) and n i32
class labels when the corresponding flag is set.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"LIRE"
VERSION = 1


def write_lire(values: np.ndarray, path, dist_labels=None, class_labels=None) -> None:
    """Write an energy matrix atomically (rename over the target at the end)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ValueError(f"values must be a non-empty 2-D matrix, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("values contain non-finite entries")
    n, l = values.shape
    flags = 0
    if dist_labels is not None:
        dist_labels = np.asarray(dist_labels, dtype=np.uint8)
        if dist_labels.shape != (n,):
            raise ValueError("dist_labels length must match the row count")
        flags |= 0x1
    if class_labels is not None:
        class_labels = np.asarray(class_labels, dtype="<i4")
        if class_labels.shape != (n,):
            raise ValueError("class_labels length must match the row count")
        flags |= 0x2

    out_dir = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".lire.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<HH", VERSION, flags))
            f.write(struct.pack("<QQ", n, l))
            f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
            if dist_labels is not None:
                f.write(dist_labels.tobytes())
            if class_labels is not None:
                f.write(class_labels.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
