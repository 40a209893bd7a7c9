"""Sealed single-file evidence container.

Layout, all integers big-endian::

    "AWEC" | version u16 | header_len u32 | header body
    (tag u8 | section_len u64 | body)*        tags: 0x10 entry, 0x20 audit,
                                                    0x30 manifest, 0x40 seal

Sections appear as ``entry* audit* manifest seal``.  The manifest lists every
entry sorted by path with its offset and digests, plus digests of the header,
of every audit record and of each whole entry section, and ends with a SHA-1
of itself.  The seal is a SHA-1 of every byte before it.  Together these let
``verify`` name the damaged section, not just notice that something changed.
"""

from __future__ import annotations

import hashlib
import struct
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

from ._codec import U8, U16, U32, U64, Cursor, pack_str16
from .errors import AcqError, ContainerError, MalformedContainer
from .fsmeta import FileAttr, Fidelity, check_path, encode_attr, path_key, read_attr
from .wireproto import DeviceInfo

MAGIC = b"AWEC"
VERSION = 1
TAG_ENTRY = 0x10
TAG_AUDIT = 0x20
TAG_MANIFEST = 0x30
TAG_SEAL = 0x40
SECTION_HEAD = struct.Struct(">BQ")
MAX_ACTION = 4096
_CHUNK = 1 << 20

SECTION_NAMES = {TAG_ENTRY: "entry", TAG_AUDIT: "audit", TAG_MANIFEST: "manifest", TAG_SEAL: "seal"}


class DigestMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ContainerHeader:
    evidence_number: str
    examiner: str
    created_at: int
    device_info: DeviceInfo
    version: int = VERSION

    def validate(self):
        if not self.evidence_number:
            raise ContainerError("INVALID_HEADER", "evidence number is empty")
        if not self.evidence_number.isascii() or len(self.evidence_number) > 64:
            raise ContainerError("INVALID_HEADER", "evidence number must be ASCII, at most 64 chars")
        if self.version != VERSION:
            raise ContainerError("INVALID_HEADER", f"version {self.version}")
        if not 0 <= self.created_at < 1 << 64:
            raise ContainerError("INVALID_HEADER", "created_at out of range")
        return self

    def encode(self) -> bytes:
        self.validate()
        body = (pack_str16(self.evidence_number) + pack_str16(self.examiner)
                + U64.pack(self.created_at) + self.device_info.encode())
        return MAGIC + U16.pack(self.version) + U32.pack(len(body)) + body


@dataclass(frozen=True)
class EntryRecord:
    path: str
    attrs: FileAttr
    fidelity: Fidelity
    data_len: int
    md5: bytes
    sha1: bytes
    offset: int


@dataclass(frozen=True)
class AuditRecord:
    ts: int
    action: str


@dataclass(frozen=True)
class Seal:
    sha1: bytes


def _chunks(data):
    if isinstance(data, (bytes, bytearray, memoryview)):
        view = memoryview(data)
        for i in range(0, len(view), _CHUNK):
            yield view[i:i + _CHUNK]
    elif hasattr(data, "read"):
        while chunk := data.read(_CHUNK):
            yield chunk
    else:
        yield from data


class ContainerWriter:
    """Open container accepting entries and audit records until sealed.

    Entries stream straight to the sink.  Audit records are held until
    ``seal`` because the layout puts them after the last entry.
    """

    def __init__(self, header: ContainerHeader, sink, clock: Callable[[], float] = time.time,
                 owns_sink: bool = False):
        self.header = header.validate()
        self.sink = sink
        self.clock = clock
        self.owns_sink = owns_sink
        self.sealed = False
        self.broken = False
        self.offset = 0
        self._hash = hashlib.sha1()
        self._entries: dict = {}
        self._audits: list = []
        self._audit_digests: list = []
        self._last_ts = 0
        try:
            self._write(header.encode())
        except OSError as exc:
            raise ContainerError("IO", str(exc)) from None
        self._header_sha1 = self._hash.copy().digest()

    def _write(self, chunk):
        self.sink.write(chunk)
        self._hash.update(chunk)
        self.offset += len(chunk)

    def _check_open(self):
        if self.sealed:
            raise ContainerError("SEALED", "container is sealed")
        if self.broken:
            raise ContainerError("IO", "container is unusable after an earlier write failure")

    @property
    def audit_log(self):
        return tuple(self._audits)

    def add_entry(self, path: str, attrs: FileAttr, fidelity: Fidelity = Fidelity.FULL, data=b"") -> EntryRecord:
        self._check_open()
        check_path(path)
        attrs.validate()
        if path in self._entries:
            raise ContainerError("DUPLICATE_PATH", path)
        data_len = attrs.size if attrs.is_file else 0
        head = pack_str16(path) + encode_attr(attrs) + U8.pack(int(Fidelity(fidelity))) + U64.pack(data_len)
        body_len = len(head) + data_len + 16 + 20
        start = self.offset
        record = hashlib.sha1()
        md5, sha1 = hashlib.md5(), hashlib.sha1()
        written = 0
        try:
            for chunk in (SECTION_HEAD.pack(TAG_ENTRY, body_len), head):
                self._write(chunk)
                record.update(chunk)
            for chunk in _chunks(data):
                written += len(chunk)
                if written > data_len:
                    break
                self._write(chunk)
                record.update(chunk)
                md5.update(chunk)
                sha1.update(chunk)
            if written != data_len:
                self.broken = True
                raise ContainerError("SIZE_MISMATCH", f"{path}: got {written} bytes, attributes say {data_len}")
            tail = md5.digest() + sha1.digest()
            self._write(tail)
            record.update(tail)
        except OSError as exc:
            self.broken = True
            raise ContainerError("IO", str(exc)) from None
        entry = EntryRecord(path, attrs, Fidelity(fidelity), data_len, md5.digest(), sha1.digest(), start)
        self._entries[path] = (entry, record.digest())
        self.append_audit(f"stored {path}, {data_len} bytes")
        return entry

    def append_audit(self, action: str) -> AuditRecord:
        self._check_open()
        if len(action.encode("utf-8")) > MAX_ACTION:
            raise ContainerError("INVALID_AUDIT", "action longer than 4096 bytes")
        ts = max(int(self.clock()), self._last_ts)
        self._last_ts = ts
        rec = AuditRecord(ts, action)
        self._audits.append(rec)
        return rec

    def seal(self) -> Seal:
        self._check_open()
        try:
            audit_digests = []
            for rec in self._audits:
                body = U64.pack(rec.ts) + pack_str16(rec.action)
                section = SECTION_HEAD.pack(TAG_AUDIT, len(body)) + body
                self._write(section)
                audit_digests.append(hashlib.sha1(section).digest())
            rows = [self._header_sha1, U32.pack(len(audit_digests)), *audit_digests,
                    U32.pack(len(self._entries))]
            for path in sorted(self._entries, key=path_key):
                entry, record_sha1 = self._entries[path]
                rows.append(pack_str16(path) + U64.pack(entry.offset) + U64.pack(entry.data_len)
                            + U8.pack(entry.fidelity) + entry.md5 + entry.sha1 + record_sha1)
            body = b"".join(rows)
            body += hashlib.sha1(body).digest()
            self._write(SECTION_HEAD.pack(TAG_MANIFEST, len(body)) + body)
            digest = self._hash.digest()
            self._write(SECTION_HEAD.pack(TAG_SEAL, 20) + digest)
            if hasattr(self.sink, "flush"):
                self.sink.flush()
            if self.owns_sink:
                self.sink.close()
        except OSError as exc:
            self.broken = True
            raise ContainerError("IO", str(exc)) from None
        self.sealed = True
        return Seal(digest)

    def entries(self):
        return [self._entries[p][0] for p in sorted(self._entries, key=path_key)]


def create_container(header: ContainerHeader, out, clock: Callable[[], float] = time.time) -> ContainerWriter:
    """Start a container on ``out``: a writable binary sink or a filesystem path.

    Paths are opened exclusively; an existing file is never overwritten.
    """
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        header.validate()
        try:
            sink = open(out, "xb")
        except FileExistsError:
            raise ContainerError("OUTPUT_EXISTS", str(out)) from None
        except OSError as exc:
            raise ContainerError("IO", str(exc)) from None
        return ContainerWriter(header, sink, clock, owns_sink=True)
    return ContainerWriter(header, out, clock)


# -- reading ------------------------------------------------------------------

@dataclass(frozen=True)
class ParsedEntry:
    index: int
    offset: int
    end: int
    path: str
    attrs: FileAttr
    fidelity: Fidelity
    data: memoryview
    md5: bytes
    sha1: bytes

    def content_intact(self) -> bool:
        return hashlib.md5(self.data).digest() == self.md5 and hashlib.sha1(self.data).digest() == self.sha1


@dataclass(frozen=True)
class ParsedAudit:
    index: int
    offset: int
    end: int
    ts: int
    action: str


@dataclass(frozen=True)
class ManifestRow:
    path: str
    offset: int
    data_len: int
    fidelity: int
    md5: bytes
    sha1: bytes
    record_sha1: bytes


@dataclass(frozen=True)
class ParsedManifest:
    offset: int
    end: int
    header_sha1: bytes
    audit_sha1s: tuple
    rows: tuple
    self_sha1: bytes
    computed_sha1: bytes


@dataclass(frozen=True)
class Section:
    kind: str
    index: Optional[int]
    start: int
    end: int


@dataclass(frozen=True)
class StoredEntry:
    path: str
    attrs: FileAttr
    fidelity: Fidelity
    data: bytes
    md5: bytes
    sha1: bytes
    intact: bool


class ContainerReader:
    """Structural parse of a sealed container held in memory.

    Raises ``MalformedContainer`` (code MALFORMED) naming the offset of the
    section that could not be parsed.
    """

    def __init__(self, data):
        self.data = memoryview(bytes(data))
        self.header, self.header_end = self._parse_header()
        self.entries: list = []
        self.audits: list = []
        self.manifest: Optional[ParsedManifest] = None
        self.seal_offset = None
        self.seal: Optional[Seal] = None
        self._by_path = None
        self._parse_sections()

    @classmethod
    def open(cls, path) -> "ContainerReader":
        with open(path, "rb") as fh:
            return cls(fh.read())

    def _parse_header(self):
        data = self.data
        try:
            if bytes(data[:4]) != MAGIC:
                raise ValueError("bad magic")
            cur = Cursor(data, 4, error_cls=ContainerError)
            version, length = cur.u16(), cur.u32()
            if version != VERSION:
                raise ValueError(f"version {version}")
            end = cur.pos + length
            if end > len(data):
                raise ValueError("header length beyond end of file")
            cur.end = end
            header = ContainerHeader(cur.str16(), cur.str16(), cur.u64(), DeviceInfo.read(cur), version)
            if cur.remaining:
                raise ValueError("header length disagrees with its fields")
            header.validate()
        except (AcqError, ValueError) as exc:
            raise MalformedContainer(0, "header", str(exc)) from None
        return header, end

    def _parse_sections(self):
        data = self.data
        pos = self.header_end
        stage = 0  # 0 entries, 1 audits, 2 after manifest, 3 after seal
        while pos < len(data):
            if stage == 3:
                raise MalformedContainer(pos, "seal", "bytes after seal")
            if len(data) - pos < SECTION_HEAD.size:
                raise MalformedContainer(pos, "section", "truncated section head")
            tag, length = SECTION_HEAD.unpack(data[pos:pos + SECTION_HEAD.size])
            kind = SECTION_NAMES.get(tag, "section")
            if tag not in SECTION_NAMES:
                raise MalformedContainer(pos, kind, f"unknown tag {tag:#04x}")
            body = pos + SECTION_HEAD.size
            end = body + length
            if end > len(data):
                raise MalformedContainer(pos, kind, "section runs past end of file")
            order = {TAG_ENTRY: 0, TAG_AUDIT: 1, TAG_MANIFEST: 2, TAG_SEAL: 3}[tag]
            if order < stage or (tag in (TAG_MANIFEST, TAG_SEAL) and order == stage):
                raise MalformedContainer(pos, kind, "section out of order")
            if tag == TAG_SEAL and stage != 2:
                raise MalformedContainer(pos, kind, "seal without manifest")
            cur = Cursor(data, body, end, error_cls=ContainerError)
            try:
                if tag == TAG_ENTRY:
                    self.entries.append(self._entry(cur, pos, end))
                elif tag == TAG_AUDIT:
                    self.audits.append(ParsedAudit(len(self.audits), pos, end, cur.u64(), cur.str16()))
                elif tag == TAG_MANIFEST:
                    self.manifest = self._manifest(cur, pos, end)
                else:
                    self.seal_offset = pos
                    self.seal = Seal(cur.take(20))
                if cur.remaining:
                    raise ValueError(f"{cur.remaining} unparsed bytes in section")
            except MalformedContainer:
                raise
            except (AcqError, ValueError) as exc:
                raise MalformedContainer(pos, kind, str(exc)) from None
            stage = order
            pos = end
        if self.seal is None:
            raise MalformedContainer(pos, "seal", "container is not sealed")

    def _entry(self, cur, start, end):
        path = check_path(cur.str16())
        attrs = read_attr(cur)
        fidelity = Fidelity(cur.u8())
        data_len = cur.u64()
        if data_len > cur.remaining:
            raise ValueError("data length beyond section")
        data_at = cur.pos
        cur.take(data_len)
        data = self.data[data_at:data_at + data_len]
        return ParsedEntry(len(self.entries), start, end, path, attrs, fidelity, data, cur.take(16), cur.take(20))

    def _manifest(self, cur, start, end):
        body_start = cur.pos
        header_sha1 = cur.take(20)
        audit_sha1s = tuple(cur.take(20) for _ in range(cur.u32()))
        count = cur.u32()
        rows = []
        for _ in range(count):
            rows.append(ManifestRow(cur.str16(), cur.u64(), cur.u64(), cur.u8(), cur.take(16), cur.take(20),
                                    cur.take(20)))
        digest_at = cur.pos
        self_sha1 = cur.take(20)
        computed = hashlib.sha1(self.data[body_start:digest_at]).digest()
        return ParsedManifest(start, end, header_sha1, audit_sha1s, tuple(rows), self_sha1, computed)

    # queries

    def sections(self) -> list:
        out = [Section("header", None, 0, self.header_end)]
        out += [Section("entry", e.index, e.offset, e.end) for e in self.entries]
        out += [Section("audit", a.index, a.offset, a.end) for a in self.audits]
        out.append(Section("manifest", None, self.manifest.offset, self.manifest.end))
        out.append(Section("seal", None, self.seal_offset, len(self.data)))
        return out

    def audit_log(self):
        return [AuditRecord(a.ts, a.action) for a in self.audits]

    def paths(self):
        return sorted((e.path for e in self.entries), key=path_key)

    def find(self, path) -> ParsedEntry:
        if self._by_path is None:
            self._by_path = {}
            for entry in self.entries:
                self._by_path.setdefault(entry.path, entry)
        try:
            return self._by_path[path]
        except KeyError:
            raise ContainerError("NOT_FOUND", path) from None

    def read_entry(self, path) -> StoredEntry:
        entry = self.find(path)
        intact = entry.content_intact()
        if not intact:
            warnings.warn(f"digest mismatch for {path}", DigestMismatchWarning, stacklevel=2)
        return StoredEntry(entry.path, entry.attrs, entry.fidelity, bytes(entry.data), entry.md5, entry.sha1, intact)


def _reader(container) -> ContainerReader:
    return container if isinstance(container, ContainerReader) else ContainerReader(container)


def read_entry(container, path: str) -> StoredEntry:
    """Stored attributes and bytes of ``path``; damaged content comes back with ``intact=False``."""
    return _reader(container).read_entry(path)


# -- verification -------------------------------------------------------------

@dataclass(frozen=True)
class Failure:
    section: str
    index: Optional[int] = None
    path: Optional[str] = None
    reason: str = ""

    def __str__(self):
        where = self.section if self.index is None else f"{self.section}[{self.index}]"
        if self.path:
            where += f" {self.path}"
        return f"{where}: {self.reason}"


@dataclass(frozen=True)
class VerifyReport:
    ok: bool
    failures: tuple
    entries: int
    audits: int

    @property
    def failed_paths(self):
        return [f.path for f in self.failures if f.section == "entry"]


def verify(container) -> VerifyReport:
    """Recompute every digest and the seal.

    Raises ``MalformedContainer`` on structural damage; digest mismatches are
    reported in the returned ``VerifyReport``.
    """
    reader = _reader(container)
    data = reader.data
    failures: dict = {}

    def fail(section, index=None, path=None, reason=""):
        failures.setdefault((section, index), Failure(section, index, path, reason))

    if hashlib.sha1(data[:reader.seal_offset]).digest() != reader.seal.sha1:
        fail("seal", reason="seal digest mismatch")

    manifest = reader.manifest
    trusted = manifest.self_sha1 == manifest.computed_sha1
    if not trusted:
        fail("manifest", reason="manifest digest mismatch")
    else:
        if hashlib.sha1(data[:reader.header_end]).digest() != manifest.header_sha1:
            fail("header", reason="header digest mismatch")
        if len(manifest.audit_sha1s) != len(reader.audits):
            fail("manifest", reason="audit count disagrees with manifest")
        for audit, expected in zip(reader.audits, manifest.audit_sha1s):
            if hashlib.sha1(data[audit.offset:audit.end]).digest() != expected:
                fail("audit", audit.index, reason="audit record digest mismatch")
        paths = [row.path for row in manifest.rows]
        if paths != sorted(set(paths), key=path_key):
            fail("manifest", reason="manifest not sorted or has duplicate paths")
        if len(manifest.rows) != len(reader.entries):
            fail("manifest", reason="entry count disagrees with manifest")
        by_offset = {row.offset: row for row in manifest.rows}
        for entry in reader.entries:
            row = by_offset.get(entry.offset)
            if row is None:
                fail("entry", entry.index, entry.path, "entry missing from manifest")
            elif hashlib.sha1(data[entry.offset:entry.end]).digest() != row.record_sha1:
                fail("entry", entry.index, row.path, "entry record digest mismatch")

    for entry in reader.entries:
        if not entry.content_intact():
            fail("entry", entry.index, entry.path, "content digest mismatch")
        elif entry.attrs.is_file and len(entry.data) != entry.attrs.size:
            fail("entry", entry.index, entry.path, "data length differs from recorded size")
    for prev, audit in zip(reader.audits, reader.audits[1:]):
        if audit.ts < prev.ts:
            fail("audit", audit.index, reason="audit timestamp goes backwards")

    ordered = sorted(failures.values(), key=lambda f: (f.section, -1 if f.index is None else f.index))
    return VerifyReport(not ordered, tuple(ordered), len(reader.entries), len(reader.audits))
