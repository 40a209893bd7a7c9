"""File attribute records, their 33-byte wire form, and device path rules."""

from __future__ import annotations

import enum
import stat
import struct
from dataclasses import dataclass, fields, replace
from typing import Optional

from ._codec import Cursor, pack_str16
from .errors import AttrError, PathError

ATTR_RECORD = struct.Struct(">IIIQIQB")
ATTR_SIZE = ATTR_RECORD.size  # 33
NSEC_PER_SEC = 1_000_000_000


class Kind(enum.IntEnum):
    FILE = 0
    DIR = 1
    SYMLINK = 2


class Fidelity(enum.IntEnum):
    FULL = 0
    CONTENT_ONLY = 1


_TYPE_BITS = {Kind.FILE: stat.S_IFREG, Kind.DIR: stat.S_IFDIR, Kind.SYMLINK: stat.S_IFLNK}


@dataclass(frozen=True)
class FileAttr:
    """Forensic metadata of one filesystem entry.

    ``mode`` holds only the permission bits (``0o7777``); the file type lives
    in ``kind`` and is folded into the wire ``mode`` field on encoding.
    """

    mode: int
    uid: int
    gid: int
    mtime_sec: int
    mtime_nsec: int
    size: int
    kind: Kind
    link_target: Optional[str] = None

    def validate(self):
        if not 0 <= self.mode <= 0o7777:
            raise AttrError("INVALID_ATTR", f"mode {self.mode:o} outside permission bits")
        for name, bits in (("uid", 32), ("gid", 32), ("mtime_sec", 64), ("size", 64)):
            value = getattr(self, name)
            if not 0 <= value < 1 << bits:
                raise AttrError("INVALID_ATTR", f"{name}={value} out of range")
        if not 0 <= self.mtime_nsec < NSEC_PER_SEC:
            raise AttrError("INVALID_ATTR", f"mtime_nsec={self.mtime_nsec}")
        if not isinstance(self.kind, Kind):
            raise AttrError("INVALID_ATTR", f"kind={self.kind!r}")
        if (self.link_target is not None) != (self.kind == Kind.SYMLINK):
            raise AttrError("INVALID_ATTR", "link_target present iff kind is symlink")
        if self.kind == Kind.DIR and self.size != 0:
            raise AttrError("INVALID_ATTR", "directories have size 0")
        return self

    @property
    def is_file(self):
        return self.kind == Kind.FILE

    @property
    def is_dir(self):
        return self.kind == Kind.DIR

    @property
    def is_symlink(self):
        return self.kind == Kind.SYMLINK


def encode_attr(attr: FileAttr) -> bytes:
    """33-byte record, followed by a u16-prefixed link target for symlinks."""
    attr.validate()
    record = ATTR_RECORD.pack(
        _TYPE_BITS[attr.kind] | attr.mode,
        attr.uid,
        attr.gid,
        attr.mtime_sec,
        attr.mtime_nsec,
        attr.size,
        int(attr.kind),
    )
    if attr.kind == Kind.SYMLINK:
        record += pack_str16(attr.link_target)
    return record


def read_attr(cur: Cursor) -> FileAttr:
    mode, uid, gid, sec, nsec, size, kind_byte = ATTR_RECORD.unpack(cur.take(ATTR_SIZE))
    try:
        kind = Kind(kind_byte)
    except ValueError:
        raise AttrError("INVALID_ATTR", f"kind byte {kind_byte:#04x}") from None
    if stat.S_IFMT(mode) != _TYPE_BITS[kind]:
        raise AttrError("INVALID_ATTR", f"mode type bits {mode:o} disagree with kind {kind.name}")
    target = cur.str16() if kind == Kind.SYMLINK else None
    attr = FileAttr(stat.S_IMODE(mode), uid, gid, sec, nsec, size, kind, target)
    return attr.validate()


def decode_attr(data) -> FileAttr:
    return read_attr(Cursor(data, error_cls=AttrError, bad_code="INVALID_ATTR"))


def diff_attr(a: FileAttr, b: FileAttr) -> frozenset:
    """Names of the fields that differ; both mtime parts report as ``"mtime"``."""
    changed = set()
    for f in fields(FileAttr):
        if getattr(a, f.name) != getattr(b, f.name):
            changed.add("mtime" if f.name.startswith("mtime") else f.name)
    return frozenset(changed)


def degrade(attr: FileAttr, acquired_at: int) -> FileAttr:
    """Attributes as a content-only channel would deliver them."""
    mode = {Kind.FILE: 0o644, Kind.DIR: 0o755, Kind.SYMLINK: 0o777}[attr.kind]
    return replace(attr, mode=mode, uid=0, gid=0, mtime_sec=acquired_at, mtime_nsec=0)


# -- device paths -----------------------------------------------------------

def check_path(path: str) -> str:
    """Validate an absolute '/'-separated device path and return it.

    ``..`` and ``.`` segments raise TRAVERSAL; other malformations raise PROTO.
    """
    if not isinstance(path, str) or not path.startswith("/"):
        raise PathError("PROTO", f"not an absolute path: {path!r}")
    if "\x00" in path:
        raise PathError("PROTO", "NUL in path")
    if path == "/":
        return path
    for segment in path[1:].split("/"):
        if segment in ("..", "."):
            raise PathError("TRAVERSAL", path)
        if not segment:
            raise PathError("PROTO", f"empty segment in {path!r}")
    return path


def join(parent: str, name: str) -> str:
    return "/" + name if parent == "/" else f"{parent}/{name}"


def parent_of(path: str) -> str:
    head = path.rsplit("/", 1)[0]
    return head or "/"


def is_under(path: str, prefix: str) -> bool:
    """Segment-aligned prefix test: ``/data/data`` covers ``/data/data/x`` but not ``/data/database``."""
    if prefix == "/":
        return True
    return path == prefix or path.startswith(prefix + "/")


def path_key(path: str) -> bytes:
    return path.encode("utf-8")
