"""Little-endian binary reading/writing with byte-offset error reporting."""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, b: bytes):
        self._parts.append(b)

    def u8(self, v: int):
        self._parts.append(struct.pack("<B", v))

    def u16(self, v: int):
        self._parts.append(struct.pack("<H", v))

    def u32(self, v: int):
        self._parts.append(struct.pack("<I", v))

    def f32(self, v: float):
        self._parts.append(struct.pack("<f", v))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.raw(b)

    def floats(self, arr: np.ndarray):
        self._parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def getvalue(self, with_crc: bool = False) -> bytes:
        body = b"".join(self._parts)
        if with_crc:
            body += struct.pack("<I", crc32(body))
        return body


class Reader:
    """Sequential reader over a bytes buffer; faults raise :class:`FormatError` at the current offset."""

    def __init__(self, data: bytes, end: int | None = None):
        self.data = data
        self.pos = 0
        self.end = len(data) if end is None else end

    @property
    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n > self.remaining:
            raise FormatError(f"truncated {what}: need {n} bytes, {self.remaining} left", self.pos)
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.take(4, what))[0]

    def string(self, what: str) -> str:
        n = self.u16(f"{what} length")
        start = self.pos
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", start) from None

    def floats(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def expect_magic(self, magic: bytes):
        got = self.data[: len(magic)]
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        self.pos = len(magic)


def check_crc(data: bytes, what: str) -> int:
    """Verify the trailing CRC32; returns the length of the protected body."""
    if len(data) < 4:
        raise FormatError(f"{what} too short for CRC trailer", len(data))
    body_len = len(data) - 4
    stored = struct.unpack("<I", data[body_len:])[0]
    if crc32(data[:body_len]) != stored:
        raise FormatError(f"{what} CRC32 mismatch", body_len)
    return body_len
