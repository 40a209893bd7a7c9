"""Simulated Android device: a seeded in-memory filesystem served over wireproto.

The tree is immutable once built; ``with_node``/``without`` return new trees,
which is how install/uninstall scenarios are modelled.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
import socket
import socketserver
import threading
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Optional

from . import deltasync
from ._codec import U16, U8, U64
from .errors import AccessError, AcqError, FixtureError, FrameError, PolicyError
from .fsmeta import FileAttr, Kind, check_path, is_under, join, parent_of, path_key, encode_attr
from .wireproto import (
    DELTA_END, DELTA_OPS, MAX_READ,
    NONROOTED_PORT, PROTOCOL_VERSION, RESPONSE_BIT, ROOTED_PORT,
    Credentials, DeviceInfo, Op, Status, encode_frame, encode_list_page,
    error_payload, ok_payload, proto_cursor, read_frame,
)

log = logging.getLogger(__name__)

AGENT_PACKAGE = "berserker.android.apps.sshdroidpro"
AGENT_UID = 10059
PACKAGES_LIST = "/data/system/packages.list"
PACKAGES_XML = "/data/system/packages.xml"
DEFAULT_DENIED = ("/data/data", "/data/system", "/data/app-private")

# keeps LIST responses well under the frame cap
LIST_PAGE = 512
# literal pieces and op batches inside DELTA_REQ response frames
LITERAL_PIECE = 256 * 1024
DELTA_BATCH = 512 * 1024


@dataclass(frozen=True)
class Profile:
    name: str
    model: str
    android_version: str
    rooted: bool
    epoch: int


PROFILES = {
    p.name: p for p in (
        Profile("apollo-2.2-rooted", "Samsung Apollo GT-I5800", "2.2", True, 1_293_840_000),
        Profile("archos-4.0-rooted", "Archos 101G9 Tablet", "4.0.4", True, 1_325_376_000),
        Profile("htc-4.1-nonrooted", "HTC One X", "4.1.1", False, 1_341_100_000),
    )
}


@dataclass(frozen=True)
class DevicePolicy:
    rooted: bool
    port: int
    credentials: Credentials = Credentials()
    denied_prefixes: tuple = DEFAULT_DENIED

    def validate(self):
        if not 0 < self.port <= 0xFFFF:
            raise PolicyError("PORT_POLICY", f"port {self.port} out of range")
        if not self.rooted and self.port < 1024:
            raise PolicyError("PORT_POLICY", f"non-rooted device cannot listen on port {self.port}")
        return self


def default_policy(profile: str) -> DevicePolicy:
    prof = get_profile(profile)
    return DevicePolicy(rooted=prof.rooted, port=ROOTED_PORT if prof.rooted else NONROOTED_PORT)


def check_access(policy: DevicePolicy, path: str) -> bool:
    """True when ``policy`` lets a client touch ``path``."""
    if policy.rooted:
        return True
    return not any(is_under(path, prefix) for prefix in policy.denied_prefixes)


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise FixtureError("UNKNOWN_PROFILE", name) from None


# -- fixture tree -------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    attr: FileAttr
    data: bytes = b""


class FixtureTree:
    """Immutable path -> Node map with the stat/list_dir/read_chunk access surface."""

    def __init__(self, nodes: Mapping[str, Node], seed: int = 0, profile: str = "",
                 device_model: str = "", android_version: str = ""):
        self.nodes = MappingProxyType(dict(nodes))
        self.seed = seed
        self.profile = profile
        self.device_model = device_model
        self.android_version = android_version
        children: dict = {path: [] for path, node in self.nodes.items() if node.attr.is_dir}
        for path in self.nodes:
            if path != "/":
                parent = parent_of(path)
                if parent not in children:
                    raise FixtureError("ORPHAN", f"{path} has no directory parent")
                children[parent].append(path.rsplit("/", 1)[1])
        self._children = {p: tuple(sorted(names, key=path_key)) for p, names in children.items()}

    def device_info(self, policy: Optional[DevicePolicy] = None) -> DeviceInfo:
        policy = policy or default_policy(self.profile)
        return DeviceInfo(self.device_model, self.android_version, policy.rooted, policy.port)

    def __contains__(self, path):
        return path in self.nodes

    def __len__(self):
        return len(self.nodes)

    def _node(self, path) -> Node:
        check_path(path)
        try:
            return self.nodes[path]
        except KeyError:
            raise AccessError("NOT_FOUND", path) from None

    def stat(self, path: str) -> FileAttr:
        return self._node(path).attr

    def list_dir(self, path: str) -> list:
        node = self._node(path)
        if not node.attr.is_dir:
            raise AccessError("NOT_DIR", path)
        return [(name, self.nodes[join(path, name)].attr) for name in self._children[path]]

    def content(self, path: str) -> bytes:
        """File bytes; a symlink yields its target string, never the target's data."""
        node = self._node(path)
        if node.attr.is_dir:
            raise AccessError("IS_DIR", path)
        if node.attr.is_symlink:
            return node.attr.link_target.encode("utf-8")
        return node.data

    def read_chunk(self, path: str, offset: int, length: int) -> bytes:
        data = self.content(path)
        return data[offset:offset + length]

    def files(self):
        return sorted((p for p, n in self.nodes.items() if n.attr.is_file), key=path_key)

    def paths(self):
        return sorted(self.nodes, key=path_key)

    def total_bytes(self):
        return sum(n.attr.size for n in self.nodes.values() if n.attr.is_file)

    def digest(self) -> str:
        """SHA-1 over every path, attribute record and content, in path order."""
        h = hashlib.sha1()
        for path in self.paths():
            node = self.nodes[path]
            h.update(path_key(path) + b"\0" + encode_attr(node.attr))
            h.update(hashlib.sha1(node.data).digest())
        return h.hexdigest()

    def _derive(self, nodes):
        return FixtureTree(nodes, self.seed, self.profile, self.device_model, self.android_version)

    def with_node(self, path: str, node: Node) -> "FixtureTree":
        check_path(path)
        nodes = dict(self.nodes)
        nodes[path] = node
        return self._derive(nodes)

    def without(self, path: str) -> "FixtureTree":
        """Remove ``path`` and everything beneath it."""
        if path not in self.nodes:
            raise AccessError("NOT_FOUND", path)
        return self._derive({p: n for p, n in self.nodes.items() if not is_under(p, path)})

    def touch(self, path: str, mtime: int) -> "FixtureTree":
        node = self.nodes[path]
        return self.with_node(path, replace(node, attr=replace(node.attr, mtime_sec=mtime, mtime_nsec=0)))


class PolicyView:
    """Tree access as seen through a device policy; denied paths raise PERM."""

    def __init__(self, tree: FixtureTree, policy: DevicePolicy):
        self.tree = tree
        self.policy = policy

    def _guard(self, path):
        check_path(path)
        if not check_access(self.policy, path):
            raise AccessError("PERM", path)

    def stat(self, path):
        self._guard(path)
        return self.tree.stat(path)

    def list_dir(self, path):
        self._guard(path)
        return self.tree.list_dir(path)

    def read_chunk(self, path, offset, length):
        self._guard(path)
        return self.tree.read_chunk(path, offset, length)

    def content(self, path):
        self._guard(path)
        return self.tree.content(path)


# -- fixture generation -------------------------------------------------------

_TEXT = (b"<?xml version='1.0' encoding='utf-8' standalone='yes' ?>\n<map>\n"
         b"    <string name=\"last_sync\">1356998400</string>\n"
         b"    <boolean name=\"enabled\" value=\"true\" />\n</map>\n")

_APPS = [
    "com.android.browser", "com.android.contacts", "com.android.providers.contacts",
    "com.android.providers.telephony", "com.android.mms", "com.android.email",
    "com.android.calendar", "com.android.gallery3d", "com.android.settings",
    "com.android.vending", "com.google.android.gm", "com.google.android.gsf",
    "com.whatsapp", "com.viber.voip", "com.skype.raider", "com.facebook.katana",
    "com.twitter.android", "com.dropbox.android",
]


def _content(rng: random.Random, size: int) -> bytes:
    """Alternating incompressible and repetitive regions."""
    out = bytearray()
    while len(out) < size:
        run = min(size - len(out), rng.randint(512, 64 * 1024))
        if rng.random() < 0.5:
            out += rng.randbytes(run)
        else:
            motif = _TEXT[: rng.randint(16, len(_TEXT))]
            out += (motif * (run // len(motif) + 1))[:run]
    return bytes(out)


def _log_size(rng, lo, hi):
    """Size drawn log-uniformly from [lo, hi]; lo == 0 allows empty files."""
    if lo == 0:
        if rng.random() < 0.05:
            return 0
        lo = 16
    return int(math.exp(rng.uniform(math.log(lo), math.log(hi))))


class _Builder:
    def __init__(self, rng: random.Random, epoch: int):
        self.rng = rng
        self.epoch = epoch
        self.nodes: dict = {}

    def _time(self):
        return self.epoch + self.rng.randint(0, 365 * 86400), self.rng.randrange(1_000_000_000)

    def dir(self, path, mode=0o771, uid=1000, gid=1000):
        if path != "/" and parent_of(path) not in self.nodes:
            self.dir(parent_of(path), mode, uid, gid)
        if path not in self.nodes:
            sec, nsec = self._time()
            self.nodes[path] = Node(FileAttr(mode, uid, gid, sec, nsec, 0, Kind.DIR))
        return path

    def file(self, path, data, mode=0o660, uid=1000, gid=1000):
        self.dir(parent_of(path))
        sec, nsec = self._time()
        self.nodes[path] = Node(FileAttr(mode, uid, gid, sec, nsec, len(data), Kind.FILE), data)

    def sized(self, path, size, **kw):
        self.file(path, _content(self.rng, size), **kw)

    def symlink(self, path, target, uid=0, gid=0):
        self.dir(parent_of(path))
        sec, nsec = self._time()
        size = len(target.encode("utf-8"))
        self.nodes[path] = Node(FileAttr(0o777, uid, gid, sec, nsec, size, Kind.SYMLINK, target))


def build_fixture(seed: int, profile: str, with_agent: bool = True) -> FixtureTree:
    """Deterministic device tree (~2000 entries, ~20 MiB) for ``(seed, profile)``.

    ``with_agent`` installs the acquisition agent package, as it would be on a
    device being examined.
    """
    prof = get_profile(profile)
    profile_index = sorted(PROFILES).index(profile)
    rng = random.Random(seed * 7919 + profile_index)
    b = _Builder(rng, prof.epoch)

    b.dir("/", 0o755, 0, 0)
    b.dir("/data", 0o771, 1000, 1000)
    b.dir("/data/app", 0o771, 1000, 1000)
    b.dir("/data/app-private", 0o771, 1000, 1000)
    b.dir("/data/data", 0o771, 1000, 1000)
    b.dir("/data/system", 0o775, 1000, 1000)
    b.dir("/cache", 0o770, 1000, 2001)
    b.dir("/sdcard", 0o775, 1000, 1015)

    apps = []
    for i, pkg in enumerate(_APPS):
        uid = 10001 + i
        apps.append((pkg, uid))
        b.sized(f"/data/app/{pkg}-1.apk", _log_size(rng, 20_000, 300_000), mode=0o644, uid=1000, gid=1000)
        base = f"/data/data/{pkg}"
        b.dir(base, 0o751, uid, uid)
        b.symlink(f"{base}/lib", f"/data/app-lib/{pkg}-1", uid=1000, gid=1000)
        for d in ("databases", "shared_prefs", "files", "cache"):
            b.dir(f"{base}/{d}", 0o771, uid, uid)
        for j in range(rng.randint(2, 5)):
            b.sized(f"{base}/databases/db{j}.db", _log_size(rng, 4096, 120_000), uid=uid, gid=uid)
            b.sized(f"{base}/databases/db{j}.db-journal", _log_size(rng, 0, 8192), uid=uid, gid=uid)
        for j in range(rng.randint(2, 6)):
            b.file(f"{base}/shared_prefs/prefs{j}.xml", _TEXT * rng.randint(1, 12), uid=uid, gid=uid)
        for j in range(rng.randint(10, 30)):
            b.sized(f"{base}/cache/c{j:04d}.tmp", _log_size(rng, 0, 16_384), mode=0o600, uid=uid, gid=uid)
        for j in range(rng.randint(0, 4)):
            b.sized(f"{base}/files/f{j}.bin", _log_size(rng, 0, 32_768), mode=0o600, uid=uid, gid=uid)
    for i in range(3):
        b.sized(f"/data/app-private/com.paid.app{i}-1.apk", _log_size(rng, 10_000, 100_000), mode=0o640)

    b.sized("/data/system/accounts.db", 24_576, mode=0o660)
    b.sized("/data/system/batterystats.bin", _log_size(rng, 1000, 60_000))
    b.file("/data/system/gesture.key", rng.randbytes(20), mode=0o600)
    for i in range(30):
        b.sized(f"/data/system/dropbox/event_{i:03d}.txt", _log_size(rng, 100, 6000), mode=0o600)
    b.file("/data/misc/wifi/wpa_supplicant.conf",
           b'ctrl_interface=wlan0\nnetwork={\n\tssid="forensics-lab"\n\tkey_mgmt=WPA-PSK\n}\n', uid=1010, gid=1010)

    # system partition: many small read-only files
    b.dir("/system", 0o755, 0, 0)
    for d in ("bin", "lib", "etc", "framework", "app", "fonts", "media/audio/ringtones"):
        b.dir(f"/system/{d}", 0o755, 0, 0)
    for i in range(120):
        b.sized(f"/system/bin/tool{i:03d}", _log_size(rng, 2000, 40_000), mode=0o755, uid=0, gid=2000)
    b.symlink("/system/bin/sh", "mksh")
    for i in range(90):
        b.sized(f"/system/lib/lib{i:03d}.so", _log_size(rng, 4000, 60_000), mode=0o644, uid=0, gid=0)
    for i in range(60):
        b.sized(f"/system/etc/conf{i:02d}.conf", _log_size(rng, 0, 4000), mode=0o644, uid=0, gid=0)
    for i in range(40):
        b.sized(f"/system/framework/fw{i:02d}.jar", _log_size(rng, 4000, 40_000), mode=0o644, uid=0, gid=0)
    for i in range(25):
        b.sized(f"/system/app/App{i:02d}.apk", _log_size(rng, 8000, 60_000), mode=0o644, uid=0, gid=0)
    for i in range(20):
        b.sized(f"/system/fonts/Font{i:02d}.ttf", _log_size(rng, 8000, 40_000), mode=0o644, uid=0, gid=0)
    for i in range(15):
        b.sized(f"/system/media/audio/ringtones/tone{i:02d}.ogg", _log_size(rng, 8000, 40_000),
                mode=0o644, uid=0, gid=0)
    b.file("/system/build.prop",
           f"ro.product.model={prof.model}\nro.build.version.release={prof.android_version}\n".encode(),
           mode=0o644, uid=0, gid=0)
    b.symlink("/vendor", "/system/vendor")
    b.symlink("/d", "/sys/kernel/debug")

    # external storage: media, downloads, deep nesting, escape links
    sd = dict(mode=0o664, uid=1000, gid=1015)
    b.dir("/sdcard/DCIM/Camera", 0o775, 1000, 1015)
    for i in range(3):
        b.sized(f"/sdcard/DCIM/Camera/IMG_2013{i:04d}.jpg", rng.randint(768 << 10, 2 << 20), **sd)
    b.sized("/sdcard/DCIM/Camera/VID_20130101.mp4", 4 << 20, **sd)
    b.file("/sdcard/DCIM/.nomedia", b"", **sd)
    for i in range(400):
        b.sized(f"/sdcard/DCIM/.thumbnails/{1000 + i}.jpg", _log_size(rng, 1000, 8000), **sd)
    for i in range(40):
        b.sized(f"/sdcard/Download/file{i:02d}.pdf", _log_size(rng, 1000, 90_000), **sd)
    for i in range(60):
        b.sized(f"/sdcard/WhatsApp/Media/WhatsApp Images/IMG-2013{i:04d}-WA0000.jpg",
                _log_size(rng, 4000, 50_000), **sd)
    b.sized("/sdcard/WhatsApp/Databases/msgstore.db.crypt", 90_000, **sd)
    for pkg, _uid in apps:
        depth = rng.randint(6, 12)
        path = f"/sdcard/Android/data/{pkg}/files" + "".join(f"/d{k}" for k in range(depth))
        b.sized(f"{path}/leaf.dat", _log_size(rng, 0, 4000), **sd)
        for k in range(rng.randint(3, 10)):
            b.sized(f"/sdcard/Android/data/{pkg}/cache/obj{k}", _log_size(rng, 0, 9000), **sd)
    b.symlink("/sdcard/escape", "/etc")
    b.symlink("/sdcard/passwd_link", "../../etc/passwd")
    b.dir("/sdcard/empty", 0o775, 1000, 1015)

    tree = FixtureTree(b.nodes, seed, profile, prof.model, prof.android_version)
    at = prof.epoch + 400 * 86400
    tree = write_package_registry(tree, apps, at)
    if with_agent:
        tree = install_package(tree, AGENT_PACKAGE, AGENT_UID, at + 3600)
    return tree


# -- package registry ---------------------------------------------------------

def render_packages_list(packages) -> bytes:
    return "".join(f"{name} {uid} /data/data/{name}\n" for name, uid in packages).encode()


def render_packages_xml(packages) -> bytes:
    lines = ["<?xml version='1.0' encoding='utf-8' standalone='yes' ?>", "<packages>"]
    for name, uid in packages:
        lines.append(f'<package name="{name}" codePath="/data/app/{name}-1.apk" '
                     f'nativeLibraryPath="/data/app-lib/{name}-1" userId="{uid}" />')
    lines.append("</packages>")
    return ("\n".join(lines) + "\n").encode()


def read_registry(tree: FixtureTree) -> list:
    from .footprint import parse_packages_list
    return [(r.package_name, r.uid) for r in parse_packages_list(tree.content(PACKAGES_LIST))]


def write_package_registry(tree: FixtureTree, packages, at: int) -> FixtureTree:
    for path, data in ((PACKAGES_LIST, render_packages_list(packages)),
                       (PACKAGES_XML, render_packages_xml(packages))):
        old = tree.nodes.get(path)
        mode, uid, gid = (old.attr.mode, old.attr.uid, old.attr.gid) if old else (0o660, 1000, 1032)
        attr = FileAttr(mode, uid, gid, at, 0, len(data), Kind.FILE)
        tree = tree.with_node(path, Node(attr, data))
    return tree


def install_package(tree: FixtureTree, package: str, uid: int, at: int) -> FixtureTree:
    """Create the app's data directory and register it in packages.list/xml."""
    base = f"/data/data/{package}"
    if base in tree:
        raise FixtureError("ALREADY_INSTALLED", package)
    rng = random.Random(package)
    def attr(kind, mode, size=0, target=None):
        return FileAttr(mode, uid, uid, at, 0, size, kind, target)
    nodes = {
        base: Node(attr(Kind.DIR, 0o751)),
        f"{base}/lib": Node(FileAttr(0o777, 1000, 1000, at, 0, len(f"/data/app-lib/{package}-1"),
                                     Kind.SYMLINK, f"/data/app-lib/{package}-1")),
        f"{base}/files": Node(attr(Kind.DIR, 0o771)),
        f"{base}/shared_prefs": Node(attr(Kind.DIR, 0o771)),
    }
    for name, size in (("dropbear_rsa_host_key", 427), ("dropbear_dss_host_key", 458)):
        data = rng.randbytes(size)
        nodes[f"{base}/files/{name}"] = Node(attr(Kind.FILE, 0o600, size), data)
    prefs = _TEXT * 2
    nodes[f"{base}/shared_prefs/{package}_preferences.xml"] = Node(attr(Kind.FILE, 0o660, len(prefs)), prefs)
    for path, node in nodes.items():
        tree = tree.with_node(path, node)
    registry = [p for p in read_registry(tree) if p[0] != package] + [(package, uid)]
    tree = write_package_registry(tree, registry, at)
    return tree.touch("/data/data", at)


def uninstall_package(tree: FixtureTree, package: str, at: int) -> FixtureTree:
    base = f"/data/data/{package}"
    tree = tree.without(base)
    registry = [p for p in read_registry(tree) if p[0] != package]
    tree = write_package_registry(tree, registry, at)
    return tree.touch("/data/data", at)


# -- server ---------------------------------------------------------------------

class _Connection:
    """Per-connection protocol state machine."""

    def __init__(self, device: "Device"):
        self.device = device
        self.greeted = False
        self.authenticated = False

    def dispatch(self, frame):
        """Yield one or more response payloads for ``frame``."""
        try:
            yield from self._dispatch(frame)
        except AccessError as exc:
            yield error_payload(Status[exc.code] if exc.code in Status.__members__ else Status.PROTO,
                                exc.message)
        except AcqError as exc:
            yield error_payload(Status.PROTO, f"{exc.code}: {exc.message}")

    def _dispatch(self, frame):
        op = frame.ftype
        cur = proto_cursor(frame.payload)
        if op == Op.HELLO:
            version = cur.u16() if cur.remaining else PROTOCOL_VERSION
            if version != PROTOCOL_VERSION:
                raise FrameError("PROTO", f"unsupported protocol version {version}")
            self.greeted = True
            yield ok_payload(U16.pack(PROTOCOL_VERSION))
            return
        if op == Op.AUTH:
            if not self.greeted:
                raise FrameError("PROTO", "AUTH before HELLO")
            try:
                creds = Credentials.read(cur)
            except ValueError as exc:
                raise FrameError("PROTO", str(exc)) from None
            if creds != self.device.policy.credentials:
                self.authenticated = False
                yield error_payload(Status.AUTH_FAIL, "authentication failed")
                return
            self.authenticated = True
            yield ok_payload()
            return
        if not self.authenticated:
            raise FrameError("PROTO", f"opcode {op:#04x} before authentication")
        view = self.device.view
        if op == Op.DEVINFO:
            yield ok_payload(self.device.info.encode())
        elif op == Op.STAT:
            yield ok_payload(encode_attr(view.stat(cur.str16())))
        elif op == Op.LIST:
            path, start = cur.str16(), cur.u32()
            entries = view.list_dir(path)
            yield ok_payload(encode_list_page(len(entries), entries[start:start + LIST_PAGE]))
        elif op == Op.READ:
            path, offset, length = cur.str16(), cur.u64(), cur.u32()
            if length > MAX_READ:
                raise FrameError("PROTO", f"read of {length} bytes")
            yield ok_payload(view.read_chunk(path, offset, length))
        elif op == Op.DELTA_REQ:
            path = cur.str16()
            try:
                sigs = deltasync.read_signatures(cur).validate()
            except deltasync.DeltaError as exc:
                raise FrameError("PROTO", f"bad signatures: {exc}") from None
            if cur.remaining:
                raise FrameError("PROTO", "trailing bytes after signatures")
            yield from self._delta(view.content(path), sigs)
        else:
            raise FrameError("PROTO", f"unknown opcode {op:#04x}")

    def _delta(self, data, sigs):
        ops = deltasync.split_literals(deltasync.compute_delta(data, sigs), LITERAL_PIECE)
        batch = []
        size = 0
        for op in ops:
            encoded = deltasync.encode_op(op)
            if batch and size + len(encoded) > DELTA_BATCH:
                yield ok_payload(U8.pack(DELTA_OPS) + b"".join(batch))
                batch, size = [], 0
            batch.append(encoded)
            size += len(encoded)
        if batch:
            yield ok_payload(U8.pack(DELTA_OPS) + b"".join(batch))
        yield ok_payload(U8.pack(DELTA_END) + U64.pack(len(data)) + deltasync.file_checksum(data))


@dataclass
class Device:
    tree: FixtureTree
    policy: DevicePolicy
    view: PolicyView = field(init=False)
    info: DeviceInfo = field(init=False)

    def __post_init__(self):
        self.view = PolicyView(self.tree, self.policy)
        self.info = self.tree.device_info(self.policy)


class _Handler(socketserver.StreamRequestHandler):
    def setup(self):
        super().setup()
        self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.server.track(self.connection, True)

    def finish(self):
        self.server.track(self.connection, False)
        try:
            super().finish()
        except OSError:
            pass

    def handle(self):
        conn = _Connection(self.server.device)
        while True:
            try:
                frame = read_frame(self.rfile)
            except FrameError as exc:
                # cannot resynchronise after a bad header
                self._send(RESPONSE_BIT, 0, error_payload(Status.PROTO, exc.message))
                return
            except OSError:
                return
            if frame is None:
                return
            if frame.ftype & RESPONSE_BIT:
                self._send(frame.ftype, frame.request_id, error_payload(Status.PROTO, "response opcode"))
                continue
            for payload in conn.dispatch(frame):
                if not self._send(frame.ftype | RESPONSE_BIT, frame.request_id, payload):
                    return

    def _send(self, ftype, rid, payload):
        try:
            self.wfile.write(encode_frame(ftype, rid, payload))
            return True
        except OSError:
            return False


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, device):
        self.device = device
        self._conns = set()
        self._lock = threading.Lock()
        super().__init__(address, _Handler)

    def track(self, sock, alive):
        with self._lock:
            (self._conns.add if alive else self._conns.discard)(sock)

    def drop_connections(self):
        with self._lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class ServerHandle:
    def __init__(self, server: _Server, policy: DevicePolicy):
        self._server = server
        self.policy = policy
        self.host, self.port = server.server_address[:2]
        self._thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05},
                                        name=f"devicesim:{self.port}", daemon=True)
        self._thread.start()

    @property
    def device(self) -> Device:
        return self._server.device

    def stop(self, timeout: float = 5.0):
        self._server.shutdown()
        self._server.drop_connections()
        self._server.server_close()
        self._thread.join(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start_server(policy: DevicePolicy, tree: FixtureTree, host: str = "127.0.0.1",
                 bind_port: Optional[int] = None) -> ServerHandle:
    """Serve ``tree`` under ``policy``.

    The port policy is judged on ``policy.port``; ``bind_port`` (0 for an
    ephemeral port) overrides only where the socket actually listens.
    """
    policy.validate()
    port = policy.port if bind_port is None else bind_port
    try:
        server = _Server((host, port), Device(tree, policy))
    except OSError as exc:
        raise PolicyError("BIND_FAILED", f"{host}:{port}: {exc}") from None
    log.info("serving %s (%s) on %s:%d", tree.profile, "rooted" if policy.rooted else "non-rooted", host, port)
    return ServerHandle(server, policy)
