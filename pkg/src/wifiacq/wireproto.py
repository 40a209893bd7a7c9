"""Framed request/response protocol between examiner and device agent.

Frame layout (all integers big-endian)::

    magic "AWE1" | ftype u8 | request_id u32 | payload_len u32 | payload

Responses use ``opcode | 0x80`` and start with a status byte.  Strings on
the wire are u16-length-prefixed UTF-8.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass
from typing import BinaryIO

from . import deltasync
from ._codec import U8, U16, U32, U64, Cursor, pack_str16
from .errors import FrameError, RemoteError
from .fsmeta import FileAttr, check_path, read_attr, encode_attr

MAGIC = b"AWE1"
HEADER = struct.Struct(">4sBII")
HEADER_SIZE = HEADER.size  # 13
MAX_PAYLOAD = 1 << 20
MAX_READ = MAX_PAYLOAD - 16
PROTOCOL_VERSION = 1
RESPONSE_BIT = 0x80

DEFAULT_USER = "root"
DEFAULT_PASSWORD = "admin"
ROOTED_PORT = 22
NONROOTED_PORT = 2222


class Op(enum.IntEnum):
    HELLO = 0x01
    AUTH = 0x02
    STAT = 0x03
    LIST = 0x04
    READ = 0x05
    DELTA_REQ = 0x06
    DEVINFO = 0x07


class Status(enum.IntEnum):
    OK = 0x00
    AUTH_FAIL = 0x01
    PERM = 0x02
    NOT_FOUND = 0x03
    PROTO = 0x04
    TRAVERSAL = 0x05
    NOT_DIR = 0x06
    IS_DIR = 0x07


# DELTA_REQ response frames carry one of these right after the status byte.
DELTA_OPS = 0
DELTA_END = 1


@dataclass(frozen=True)
class Frame:
    ftype: int
    request_id: int
    payload: bytes = b""

    @property
    def size(self):
        return HEADER_SIZE + len(self.payload)


@dataclass(frozen=True)
class Credentials:
    username: str = DEFAULT_USER
    password: str = DEFAULT_PASSWORD

    def __post_init__(self):
        if not self.username:
            raise ValueError("username must be non-empty")
        for name in ("username", "password"):
            if len(getattr(self, name).encode("utf-8")) > 64:
                raise ValueError(f"{name} longer than 64 bytes")

    def encode(self):
        return pack_str16(self.username) + pack_str16(self.password)

    @classmethod
    def read(cls, cur):
        return cls(cur.str16(), cur.str16())


@dataclass(frozen=True)
class DeviceInfo:
    model: str
    android_version: str
    rooted: bool
    port: int

    def __post_init__(self):
        if not 0 <= self.port <= 0xFFFF:
            raise ValueError(f"port {self.port} out of range")
        if not self.rooted and self.port < 1024:
            raise ValueError("non-rooted devices cannot listen below port 1024")

    def encode(self):
        return (pack_str16(self.model) + pack_str16(self.android_version)
                + U8.pack(int(self.rooted)) + U16.pack(self.port))

    @classmethod
    def read(cls, cur):
        return cls(cur.str16(), cur.str16(), bool(cur.u8()), cur.u16())


# -- frame codec ------------------------------------------------------------

def encode_frame(ftype: int, request_id: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FrameError("OVERSIZE", f"payload of {len(payload)} bytes")
    return HEADER.pack(MAGIC, ftype, request_id, len(payload)) + bytes(payload)


def _check_header(head):
    magic, ftype, request_id, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise FrameError("PROTO", f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise FrameError("PROTO", f"declared payload of {length} bytes")
    return ftype, request_id, length


def decode_frame(data, offset: int = 0) -> Frame:
    """Decode the frame starting at ``offset``; it occupies ``frame.size`` bytes."""
    if len(data) - offset < HEADER_SIZE:
        # a short prefix can still be judged on its magic
        prefix = bytes(data[offset:offset + 4])
        if prefix != MAGIC[:len(prefix)]:
            raise FrameError("PROTO", f"bad magic {prefix!r}")
        raise FrameError("TRUNCATED", "incomplete header")
    ftype, request_id, length = _check_header(bytes(data[offset:offset + HEADER_SIZE]))
    start = offset + HEADER_SIZE
    if len(data) - start < length:
        raise FrameError("TRUNCATED", f"payload needs {length} bytes")
    return Frame(ftype, request_id, bytes(data[start:start + length]))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_frame(stream: BinaryIO):
    """Read one frame from a blocking stream; ``None`` on clean EOF."""
    head = _read_exact(stream, HEADER_SIZE)
    if not head:
        return None
    if len(head) < HEADER_SIZE:
        raise FrameError("TRUNCATED", "connection closed mid-header")
    ftype, request_id, length = _check_header(head)
    payload = _read_exact(stream, length)
    if len(payload) < length:
        raise FrameError("TRUNCATED", "connection closed mid-payload")
    return Frame(ftype, request_id, payload)


# -- payload helpers shared by client and server -----------------------------

def proto_cursor(payload):
    return Cursor(payload, error_cls=FrameError, bad_code="PROTO")


def ok_payload(body: bytes = b"") -> bytes:
    return U8.pack(Status.OK) + body


def error_payload(status: Status, message: str = "") -> bytes:
    return U8.pack(status) + pack_str16(message[:1024])


def path_request(path: str, extra: bytes = b"") -> bytes:
    return pack_str16(path) + extra


def encode_list_page(total: int, entries) -> bytes:
    parts = [U32.pack(total), U32.pack(len(entries))]
    for name, attr in entries:
        parts.append(pack_str16(name))
        parts.append(encode_attr(attr))
    return b"".join(parts)


# -- client -----------------------------------------------------------------

@dataclass(frozen=True)
class DeltaResult:
    ops: list
    file_len: int
    sha1: bytes


class Session:
    """Client side of one connection.

    Not thread-safe: one caller at a time, though the object may change
    threads between calls.
    """

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.stream = sock.makefile("rb")
        self.next_id = 1
        self.authenticated = False
        self.device_info = None

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "Session":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def close(self):
        try:
            self.stream.close()
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # low level

    def send(self, op: int, payload: bytes = b"") -> int:
        rid = self.next_id
        self.next_id = (self.next_id + 1) & 0xFFFFFFFF
        self.sock.sendall(encode_frame(op, rid, payload))
        return rid

    def receive(self, op: int, rid: int) -> Cursor:
        """Next response for ``rid``; raises ``RemoteError`` on a non-OK status."""
        frame = read_frame(self.stream)
        if frame is None:
            raise FrameError("PROTO", "connection closed by device")
        if frame.ftype != (op | RESPONSE_BIT) or frame.request_id != rid:
            raise FrameError("PROTO", f"unexpected response {frame.ftype:#04x}/{frame.request_id}")
        cur = proto_cursor(frame.payload)
        status = cur.u8()
        if status != Status.OK:
            try:
                name = Status(status).name
            except ValueError:
                name = "PROTO"
            message = cur.str16() if cur.remaining >= 2 else ""
            raise RemoteError(name, message)
        return cur

    def call(self, op: int, payload: bytes = b"") -> Cursor:
        return self.receive(op, self.send(op, payload))

    # operations

    def hello(self) -> int:
        return self.call(Op.HELLO, U16.pack(PROTOCOL_VERSION)).u16()

    def handshake(self, credentials: Credentials = Credentials()) -> DeviceInfo:
        self.hello()
        self.call(Op.AUTH, credentials.encode())
        self.authenticated = True
        self.device_info = self.device_info_request()
        return self.device_info

    def device_info_request(self) -> DeviceInfo:
        return DeviceInfo.read(self.call(Op.DEVINFO))

    def stat(self, path: str) -> FileAttr:
        return read_attr(self.call(Op.STAT, path_request(check_path(path))))

    def list_dir(self, path: str) -> list:
        check_path(path)
        entries = []
        while True:
            cur = self.call(Op.LIST, path_request(path, U32.pack(len(entries))))
            total, count = cur.u32(), cur.u32()
            for _ in range(count):
                entries.append((cur.str16(), read_attr(cur)))
            if len(entries) >= total or count == 0:
                return entries

    def read_chunk(self, path: str, offset: int, length: int) -> bytes:
        if length > MAX_READ:
            raise FrameError("OVERSIZE", f"read of {length} bytes exceeds {MAX_READ}")
        extra = U64.pack(offset) + U32.pack(length)
        return self.call(Op.READ, path_request(check_path(path), extra)).rest()

    def read_file(self, path: str, chunk: int = 512 * 1024) -> bytes:
        parts = []
        offset = 0
        while True:
            data = self.read_chunk(path, offset, chunk)
            if not data:
                return b"".join(parts)
            parts.append(data)
            offset += len(data)

    def request_delta(self, path: str, basis_signatures: deltasync.SignatureSet) -> DeltaResult:
        payload = path_request(check_path(path), deltasync.encode_signatures(basis_signatures))
        rid = self.send(Op.DELTA_REQ, payload)
        ops = []
        while True:
            cur = self.receive(Op.DELTA_REQ, rid)
            kind = cur.u8()
            if kind == DELTA_END:
                file_len, sha1 = cur.u64(), cur.take(20)
                return DeltaResult(ops, file_len, sha1)
            if kind != DELTA_OPS:
                raise FrameError("PROTO", f"unknown delta frame kind {kind}")
            while cur.remaining:
                ops.append(deltasync.read_op(cur))

    def fetch(self, path: str, basis: bytes = b"", block_size: int = deltasync.DEFAULT_BLOCK_SIZE):
        """Rebuild the remote file from ``basis``; returns ``(data, literal_bytes)``."""
        sigs = deltasync.build_signatures(basis, block_size) if basis else \
            deltasync.SignatureSet(block_size, 0, ())
        result = self.request_delta(path, sigs)
        data = deltasync.apply_delta(basis, result.ops, sigs)
        if len(data) != result.file_len or deltasync.file_checksum(data) != result.sha1:
            raise FrameError("CHECKSUM", f"reconstructed {path} does not match device checksum")
        return data, deltasync.literal_bytes(result.ops)
