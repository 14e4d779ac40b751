"""Canonical length-prefixed binary encoding.

Every domain type serializes through these helpers so that the WAL, the
transports and the block store all agree on one deterministic byte layout:
integers are big-endian fixed width, byte strings are u32-length-prefixed,
lists are u32-count-prefixed, and fields follow declaration order.
"""

from __future__ import annotations

import struct

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

MICROS = 1_000_000


class DecodeError(ValueError):
    """Buffer does not hold a well-formed canonical encoding."""


class Writer:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(_U8.pack(value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(_U32.pack(value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(_U64.pack(value))
        return self

    def boolean(self, value: bool) -> "Writer":
        self._parts.append(_U8.pack(1 if value else 0))
        return self

    def duration(self, seconds: float) -> "Writer":
        # durations are stored as integer microseconds so encodings stay exact
        return self.u64(round(seconds * MICROS))

    def bytes_(self, value: bytes) -> "Writer":
        self._parts.append(_U32.pack(len(value)))
        self._parts.append(value)
        return self

    def raw(self, value: bytes) -> "Writer":
        self._parts.append(value)
        return self

    def list_(self, items, write_item) -> "Writer":
        items = list(items)
        self.u32(len(items))
        for item in items:
            write_item(self, item)
        return self

    def optional(self, value, write_item) -> "Writer":
        if value is None:
            return self.boolean(False)
        self.boolean(True)
        write_item(self, value)
        return self

    def done(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_buf", "_pos")

    def __init__(self, buf: bytes) -> None:
        self._buf = buf
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._buf):
            raise DecodeError(f"truncated: wanted {n} bytes at offset {self._pos}")
        out = self._buf[self._pos:end]
        self._pos = end
        return out

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def boolean(self) -> bool:
        v = self.u8()
        if v > 1:
            raise DecodeError(f"invalid boolean byte {v}")
        return v == 1

    def duration(self) -> float:
        return self.u64() / MICROS

    def bytes_(self) -> bytes:
        return self._take(self.u32())

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def list_(self, read_item) -> list:
        return [read_item(self) for _ in range(self.u32())]

    def optional(self, read_item):
        return read_item(self) if self.boolean() else None

    @property
    def remaining(self) -> int:
        return len(self._buf) - self._pos

    def expect_end(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes after value")
