"""Little-endian binary framing shared by the bank and checkpoint formats."""

from __future__ import annotations

import math
import struct

import numpy as np


class FileFormatError(ValueError):
    """Base class for unreadable bank or checkpoint files."""


class BadMagicError(FileFormatError):
    pass


class UnsupportedVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class Reader:
    """Cursor over an in-memory byte buffer that raises on short reads."""

    def __init__(self, buf: bytes, what: str):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).copy()

    def magic(self, expected: bytes) -> None:
        got = bytes(self.take(len(expected))) if len(self.buf) >= len(expected) else bytes(self.buf)
        if got != expected:
            raise BadMagicError(f"{self.what}: expected magic {expected!r}, found {got!r}")

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


MAX_RANK = 32


def pack(fmt: str, *vals) -> bytes:
    return struct.pack("<" + fmt, *vals)


def pack_named_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim > MAX_RANK:
        raise ValueError(f"tensor {name!r} has too many dimensions")
    parts = [pack("H", len(raw)), raw, pack("B", arr.ndim)]
    parts += [pack("Q", n) for n in arr.shape]
    parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def read_named_tensor(r: Reader) -> tuple[str, np.ndarray]:
    n = r.unpack("H")
    try:
        name = bytes(r.take(n)).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FileFormatError(f"{r.what}: tensor name is not UTF-8") from exc
    rank = r.unpack("B")
    if rank > MAX_RANK:
        raise FileFormatError(f"{r.what}: tensor {name!r} has rank {rank} (max {MAX_RANK})")
    shape = tuple(r.unpack("Q") for _ in range(rank))
    count = math.prod(shape)
    if count * 8 > len(r.buf) - r.pos:
        raise TruncatedFileError(f"{r.what}: tensor {name!r} of shape {shape} runs past end of file")
    try:
        return name, r.array("<f8", count).astype(np.float64).reshape(shape)
    except ValueError as exc:
        raise FileFormatError(f"{r.what}: tensor {name!r} has unusable shape {shape}") from exc
