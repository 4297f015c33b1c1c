"""Canonical binary encoding and content digests.

Every on-ledger structure is serialized through these helpers in a fixed
field order so digests are identical across runs and platforms. Integers
are big-endian and unsigned; variable-length fields are length-prefixed.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable

DIGEST_SIZE = 32


class DecodeError(ValueError):
    """Byte stream does not parse as the expected canonical encoding."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def enc_u8(value: int) -> bytes:
    return struct.pack(">B", value)


def enc_u32(value: int) -> bytes:
    return struct.pack(">I", value)


def enc_u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def enc_bytes(value: bytes) -> bytes:
    return enc_u32(len(value)) + value


def enc_str(value: str) -> bytes:
    return enc_bytes(value.encode("utf-8"))


def enc_opt_u64(value: int | None) -> bytes:
    if value is None:
        return enc_u8(0)
    return enc_u8(1) + enc_u64(value)


def enc_seq(parts: Iterable[bytes]) -> bytes:
    items = list(parts)
    return enc_u32(len(items)) + b"".join(items)


class Reader:
    """Sequential decoder for the canonical encoding."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise DecodeError("truncated input")
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def bytes_(self) -> bytes:
        return self._take(self.u32())

    def str_(self) -> str:
        try:
            return self.bytes_().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8") from exc

    def opt_u64(self) -> int | None:
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise DecodeError("bad optional flag")
        return self.u64()

    def count(self) -> int:
        return self.u32()

    def done(self) -> bool:
        return self._pos == len(self._data)

    def expect_done(self) -> None:
        if not self.done():
            raise DecodeError("trailing bytes")
