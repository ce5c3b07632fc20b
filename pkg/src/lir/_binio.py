"""Little-endian binary file helpers shared by the checkpoint/detector/energy formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FileFormatError(ValueError):
    """Raised when a binary artifact file is malformed.

    ``reason`` is a stable machine-readable tag: "magic", "version",
    "truncated", "size", "labels", or "field".
    """

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


def read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FileFormatError(
            "truncated",
            f"truncated file while reading {what} at offset {offset}: "
            f"expected {n} bytes, got {len(buf)}",
        )
    return buf


def expect_magic(f: BinaryIO, magic: bytes) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise FileFormatError("magic", f"bad magic bytes: expected {magic!r}, got {got!r}")


def expect_version(f: BinaryIO, supported: int) -> int:
    (version,) = struct.unpack("<H", read_exact(f, 2, "format version"))
    if version != supported:
        raise FileFormatError("version", f"unsupported format version {version}")
    return version


def write_u16(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<H", value))


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def write_u64(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<Q", value))


def read_u8(f: BinaryIO, what: str) -> int:
    return struct.unpack("<B", read_exact(f, 1, what))[0]


def read_u16(f: BinaryIO, what: str) -> int:
    return struct.unpack("<H", read_exact(f, 2, what))[0]


def read_u32(f: BinaryIO, what: str) -> int:
    return struct.unpack("<I", read_exact(f, 4, what))[0]


def read_u64(f: BinaryIO, what: str) -> int:
    return struct.unpack("<Q", read_exact(f, 8, what))[0]


def write_f64_array(f: BinaryIO, a: np.ndarray) -> None:
    f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_f64_array(f: BinaryIO, count: int, what: str) -> np.ndarray:
    buf = read_exact(f, 8 * count, what)
    return np.frombuffer(buf, dtype="<f8", count=count).astype(np.float64)
