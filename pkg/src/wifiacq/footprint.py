"""Install-footprint analysis: directory snapshots, their diff, and packages.list."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

from .errors import AccessError, ParseError
from .fsmeta import FileAttr, check_path, decode_attr, diff_attr, encode_attr, join, path_key

READ_CHUNK = 512 * 1024


@dataclass(frozen=True)
class SnapshotEntry:
    attr: FileAttr
    sha1: Optional[str] = None  # files only


@dataclass
class Snapshot:
    label: str
    entries: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def paths(self):
        return sorted(self.entries, key=path_key)

    def to_text(self) -> str:
        lines = [f"# snapshot\t{_escape(self.label)}"]
        for path, reason in self.skipped:
            lines.append(f"# skipped\t{_escape(path)}\t{reason}")
        for path in self.paths():
            e = self.entries[path]
            lines.append(f"{_escape(path)}\t{encode_attr(e.attr).hex()}\t{e.sha1 or '-'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Snapshot":
        snap = cls(label="")
        for line_no, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if parts[0] == "# snapshot" and len(parts) == 2:
                snap.label = _unescape(parts[1])
            elif parts[0] == "# skipped" and len(parts) == 3:
                snap.skipped.append((_unescape(parts[1]), parts[2]))
            elif len(parts) == 3 and not line.startswith("#"):
                try:
                    attr = decode_attr(bytes.fromhex(parts[1]))
                except ValueError as exc:
                    raise ParseError(line_no, str(exc)) from None
                except AccessError as exc:
                    raise ParseError(line_no, exc.code) from None
                except Exception as exc:  # AttrError
                    raise ParseError(line_no, str(exc)) from None
                snap.entries[_unescape(parts[0])] = SnapshotEntry(attr, None if parts[2] == "-" else parts[2])
            else:
                raise ParseError(line_no, "expected 'path<TAB>attr-hex<TAB>sha1-hex'")
        return snap


_ESCAPES = {"%": "%25", "\t": "%09", "\n": "%0A", "\r": "%0D"}


def _escape(text):
    return "".join(_ESCAPES.get(ch, ch) for ch in text)


def _unescape(text):
    for raw, esc in reversed(list(_ESCAPES.items())):
        text = text.replace(esc, raw)
    return text


def _sha1_of(access, path) -> str:
    h = hashlib.sha1()
    offset = 0
    while True:
        chunk = access.read_chunk(path, offset, READ_CHUNK)
        if not chunk:
            return h.hexdigest()
        h.update(chunk)
        offset += len(chunk)


def capture_snapshot(access, root: str = "/data", label: str = "") -> Snapshot:
    """Walk ``root`` through any object offering ``stat``/``list_dir``/``read_chunk``.

    Works the same over a local tree or a live session.  Entries that raise
    PERM or NOT_FOUND are listed in ``skipped`` rather than aborting.
    """
    snap = Snapshot(label)
    check_path(root)
    try:
        root_attr = access.stat(root)
    except AccessError as exc:
        snap.skipped.append((root, exc.code))
        return snap

    def visit(path, attr):
        digest = None
        if attr.is_file:
            try:
                digest = _sha1_of(access, path)
            except AccessError as exc:
                snap.skipped.append((path, exc.code))
                return
        elif attr.is_dir:
            try:
                children = access.list_dir(path)
            except AccessError as exc:
                snap.skipped.append((path, exc.code))
                return
        snap.entries[path] = SnapshotEntry(attr, digest)
        if attr.is_dir:
            for name, child in children:
                visit(join(path, name), child)

    visit(root, root_attr)
    return snap


@dataclass(frozen=True)
class FootprintDiff:
    added: frozenset
    removed: frozenset
    modified: dict  # path -> frozenset of changed attribute names, plus "content"

    @property
    def content_modified(self) -> frozenset:
        """Paths whose file content changed, ignoring attribute-only changes."""
        return frozenset(p for p, changes in self.modified.items() if "content" in changes)

    @property
    def empty(self):
        return not (self.added or self.removed or self.modified)


def diff_snapshots(s1: Snapshot, s2: Snapshot) -> FootprintDiff:
    a, b = s1.entries, s2.entries
    modified = {}
    for path in a.keys() & b.keys():
        changes = set(diff_attr(a[path].attr, b[path].attr))
        if a[path].sha1 != b[path].sha1:
            changes.add("content")
        if changes:
            modified[path] = frozenset(changes)
    return FootprintDiff(frozenset(b.keys() - a.keys()), frozenset(a.keys() - b.keys()), modified)


@dataclass(frozen=True)
class PackageRecord:
    package_name: str
    uid: int
    data_dir: str


def parse_packages_list(data: bytes) -> list:
    """Records of ``name uid data_dir`` lines; blank lines are ignored."""
    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(0, f"not UTF-8: {exc}") from None
    records = []
    seen = set()
    for line_no, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(line_no, f"expected 3 fields, got {len(parts)}")
        name, uid_text, data_dir = parts
        if not uid_text.isdigit() or int(uid_text) >= 1 << 32:
            raise ParseError(line_no, f"bad uid {uid_text!r}")
        if not data_dir.startswith("/"):
            raise ParseError(line_no, f"data dir {data_dir!r} is not absolute")
        if name in seen:
            raise ParseError(line_no, f"duplicate package {name}")
        seen.add(name)
        records.append(PackageRecord(name, int(uid_text), data_dir))
    return records


@dataclass(frozen=True)
class InstallScenario:
    before: Snapshot
    installed: Snapshot
    uninstalled: Snapshot
    install_diff: FootprintDiff
    uninstall_diff: FootprintDiff


def run_install_scenario(tree, package: str, uid: int, at: int, root: str = "/data") -> InstallScenario:
    """Snapshot ``root`` before install, after install and after uninstall of ``package``."""
    from .devicesim import install_package, uninstall_package

    installed = install_package(tree, package, uid, at)
    removed = uninstall_package(installed, package, at + 86400)
    s1 = capture_snapshot(tree, root, "before-install")
    s2 = capture_snapshot(installed, root, "after-install")
    s3 = capture_snapshot(removed, root, "after-uninstall")
    return InstallScenario(s1, s2, s3, diff_snapshots(s1, s2), diff_snapshots(s2, s3))
