"""Fixed-width identifiers and the canonical length-prefixed byte encoding.

Every variable-length field is written as a 4-byte big-endian length followed
by the raw bytes. Integers are 8-byte big-endian unsigned. Text is UTF-8.
The same rules are used for transaction ids, block headers, chunk digests and
the chain export format, so a single reader/writer pair covers all of them.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable


class Digest(bytes):
    """A 32-byte SHA-256 value."""

    SIZE = 32

    def __new__(cls, value: bytes | bytearray | memoryview) -> "Digest":
        value = bytes(value)
        if len(value) != cls.SIZE:
            raise ValueError(f"digest must be {cls.SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def fromhex(cls, text: str) -> "Digest":  # type: ignore[override]
        return cls(bytes.fromhex(text))

    def __repr__(self) -> str:
        return f"Digest({self.hex()[:16]}…)"

    def __str__(self) -> str:
        return self.hex()


class Address(bytes):
    """A 20-byte participant or contract identifier, rendered as 0x-hex."""

    SIZE = 20

    def __new__(cls, value: bytes | bytearray | memoryview) -> "Address":
        value = bytes(value)
        if len(value) != cls.SIZE:
            raise ValueError(f"address must be {cls.SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def parse(cls, text: str) -> "Address":
        text = text[2:] if text.startswith(("0x", "0X")) else text
        return cls(bytes.fromhex(text))

    @classmethod
    def derive(cls, *parts: bytes) -> "Address":
        return cls(sha256(*parts)[-cls.SIZE:])

    def __repr__(self) -> str:
        return f"Address({self})"

    def __str__(self) -> str:
        return "0x" + self.hex()


ZERO_DIGEST = Digest(bytes(32))


def sha256(*parts: bytes) -> Digest:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return Digest(h.digest())


def u64(value: int) -> bytes:
    return struct.pack(">Q", value)


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def uint(self, value: int) -> "Writer":
        self._parts.append(u64(value))
        return self

    def raw(self, value: bytes) -> "Writer":
        self._parts.append(bytes(value))
        return self

    def blob(self, value: bytes) -> "Writer":
        self._parts.append(struct.pack(">I", len(value)))
        self._parts.append(bytes(value))
        return self

    def text(self, value: str) -> "Writer":
        return self.blob(value.encode("utf-8"))

    def pairs(self, items: Iterable[tuple[str, str]]) -> "Writer":
        items = list(items)
        self.uint(len(items))
        for key, value in items:
            self.text(key).text(value)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if n < 0 or end > len(self._data):
            raise ValueError("truncated input")
        out = bytes(self._data[self._pos:end])
        self._pos = end
        return out

    def uint(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        (n,) = struct.unpack(">I", self._take(4))
        return self._take(n)

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def pairs(self) -> tuple[tuple[str, str], ...]:
        count = self.uint()
        if count > len(self._data):
            raise ValueError("implausible pair count")
        return tuple((self.text(), self.text()) for _ in range(count))

    def done(self) -> bool:
        return self._pos == len(self._data)

    def expect_end(self) -> None:
        if not self.done():
            raise ValueError(f"{len(self._data) - self._pos} trailing bytes")
