"""Little-endian record helpers shared by the on-disk formats."""

import io
import os
import struct

from .errors import FormatError, IoError


def read_source(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        try:
            with open(source, "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise IoError(str(exc)) from exc
    return source.read()


def write_destination(destination, payload: bytes) -> int:
    if destination is None:
        return len(payload)
    if isinstance(destination, (str, os.PathLike)):
        try:
            with open(destination, "wb") as fh:
                fh.write(payload)
        except OSError as exc:
            raise IoError(str(exc)) from exc
    else:
        destination.write(payload)
    return len(payload)


class Reader:
    """Cursor over a byte buffer that raises FormatError on truncation."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated payload at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def magic(self, expected: bytes):
        got = self.take(len(expected))
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def finish(self):
        if self.remaining:
            raise FormatError(f"{self.what}: {self.remaining} trailing bytes")


def buffer() -> io.BytesIO:
    return io.BytesIO()
