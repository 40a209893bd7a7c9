"""Big-endian packing helpers and a bounds-checked read cursor."""

import struct

from .errors import AcqError

U8 = struct.Struct(">B")
U16 = struct.Struct(">H")
U32 = struct.Struct(">I")
U64 = struct.Struct(">Q")


def pack_str16(text, limit=0xFFFF):
    raw = text.encode("utf-8")
    if len(raw) > limit:
        raise ValueError(f"string of {len(raw)} bytes exceeds limit {limit}")
    return U16.pack(len(raw)) + raw


class Cursor:
    """Sequential reader over a bytes-like object.

    Running past the end raises ``error_cls("TRUNCATED")``; undecodable text
    raises ``error_cls(bad_code)``.
    """

    def __init__(self, data, offset=0, end=None, error_cls=AcqError, bad_code="PROTO"):
        self.data = memoryview(data)
        self.pos = offset
        self.end = len(data) if end is None else end
        self.error_cls = error_cls
        self.bad_code = bad_code

    @property
    def remaining(self):
        return self.end - self.pos

    def take(self, n):
        if n < 0 or self.pos + n > self.end:
            raise self.error_cls("TRUNCATED", f"need {n} bytes at {self.pos}, have {self.remaining}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def u8(self):
        return U8.unpack(self.take(1))[0]

    def u16(self):
        return U16.unpack(self.take(2))[0]

    def u32(self):
        return U32.unpack(self.take(4))[0]

    def u64(self):
        return U64.unpack(self.take(8))[0]

    def str16(self):
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise self.error_cls(self.bad_code, f"invalid UTF-8: {exc}") from None

    def rest(self):
        return self.take(self.remaining)
