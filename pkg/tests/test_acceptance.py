"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import hashlib
import io
import random
import socket
import time

import numpy as np

from wifiacq import deltasync
from wifiacq.acqcli import AcquisitionConfig, acquire
from wifiacq.devicesim import (
    AGENT_PACKAGE, AGENT_UID, DEFAULT_DENIED, PACKAGES_LIST, PACKAGES_XML, DevicePolicy,
    build_fixture, default_policy, start_server,
)
from wifiacq.errors import MalformedContainer, PolicyError
from wifiacq.evidence import ContainerHeader, ContainerReader, create_container, verify
from wifiacq.fsmeta import FileAttr, Fidelity, Kind, diff_attr, is_under
from wifiacq.footprint import run_install_scenario
from wifiacq.wireproto import DeviceInfo

from conftest import fixed_clock

SEED = 42


def _acquire(server, out, **kw):
    cfg = AcquisitionConfig("EV-42", server.host, str(out), port=server.port, examiner="examiner", **kw)
    return acquire(cfg, fixed_clock())


def test_criterion_1_round_trip_fidelity(apollo_tree, tmp_path, criterion):
    out = tmp_path / "apollo.awec"
    with start_server(default_policy("apollo-2.2-rooted"), apollo_tree, bind_port=0) as srv:
        t0 = time.monotonic()
        report = _acquire(srv, out)
        elapsed = time.monotonic() - t0
    reader = ContainerReader.open(out)
    mismatches = []
    for path in apollo_tree.paths():
        src = apollo_tree.stat(path)
        try:
            entry = reader.find(path)
        except Exception:
            mismatches.append(f"missing {path}")
            continue
        expected = apollo_tree.content(path) if src.is_file else b""
        if diff_attr(src, entry.attrs) or entry.fidelity != Fidelity.FULL:
            mismatches.append(f"attrs {path}")
        if entry.md5 != hashlib.md5(expected).digest() or entry.sha1 != hashlib.sha1(expected).digest() \
                or bytes(entry.data) != expected:
            mismatches.append(f"content {path}")
    extra = set(reader.paths()) - set(apollo_tree.paths())
    ok = verify(reader).ok
    passed = not mismatches and not extra and ok and report.skipped == [] and elapsed < 10
    criterion(1, "apollo acquisition matches fixture exactly", passed,
              f"{len(apollo_tree)} entries, {apollo_tree.total_bytes()} bytes, {elapsed:.2f} s, "
              f"{len(mismatches)} mismatches, verify {'ok' if ok else 'failed'}")


def _mutate_blocks(rng, basis, bs, fraction):
    """Change ``fraction`` of the blocks in place, by overwrite, insertion or deletion."""
    nblocks = -(-len(basis) // bs)
    chosen = set(rng.sample(range(nblocks), max(1, int(nblocks * fraction))))
    out = bytearray()
    for i in range(nblocks):
        block = basis[i * bs:(i + 1) * bs]
        if i in chosen:
            at = rng.randrange(len(block))
            kind = rng.choice(("overwrite", "insert", "delete"))
            n = rng.randint(1, 64)
            if kind == "overwrite":
                block = block[:at] + rng.randbytes(n) + block[at + n:]
            elif kind == "insert":
                block = block[:at] + rng.randbytes(n) + block[at:]
            else:
                block = block[:at] + block[at + n:]
        out += block
    return bytes(out), len(chosen)


def _random_pair(rng):
    size = rng.randint(0, 1 << 20)
    basis = rng.randbytes(size)
    kind = rng.choice(("edit", "shift", "unrelated", "truncate", "append", "empty"))
    if kind == "edit":
        src = bytearray(basis)
        for _ in range(rng.randint(1, 8)):
            if src:
                at = rng.randrange(len(src))
                src[at:at + rng.randint(1, 5000)] = rng.randbytes(rng.randint(0, 5000))
        src = bytes(src)
    elif kind == "shift":
        src = rng.randbytes(rng.randint(1, 3000)) + basis
    elif kind == "unrelated":
        src = rng.randbytes(rng.randint(0, 1 << 20))
    elif kind == "truncate":
        src = basis[: rng.randint(0, size)]
    elif kind == "append":
        src = basis + rng.randbytes(rng.randint(1, 5000))
    else:
        src = b""
    return basis, src[: 1 << 20]


def test_criterion_2_delta_correctness_and_efficiency(criterion):
    rng = random.Random(SEED)
    bs = deltasync.DEFAULT_BLOCK_SIZE
    failures = 0
    for _ in range(200):
        basis, source = _random_pair(rng)
        sigs = deltasync.build_signatures(basis, bs)
        if deltasync.apply_delta(basis, deltasync.compute_delta(source, sigs), sigs) != source:
            failures += 1

    worst = 0.0
    for _ in range(200):
        basis = rng.randbytes(rng.randint(20 * bs, 1 << 20))
        source, _changed = _mutate_blocks(rng, basis, bs, 0.10)
        sigs = deltasync.build_signatures(basis, bs)
        ops = deltasync.compute_delta(source, sigs)
        if deltasync.apply_delta(basis, ops, sigs) != source:
            failures += 1
        worst = max(worst, deltasync.literal_bytes(ops) / len(source))
    criterion(2, "delta round-trip exact, literal share with 90% unchanged blocks <= 20%",
              failures == 0 and worst <= 0.20,
              f"{failures} round-trip failures over 400 pairs, worst literal share {worst:.3f}")


def _direct_weak_sums(buf, window):
    """Weak sum of every window straight from its definition (float64 sums are exact here)."""
    x = np.frombuffer(buf, dtype=np.uint8)
    views = np.lib.stride_tricks.sliding_window_view(x, window)
    weights = np.arange(window, 0, -1, dtype=np.float64)
    out = np.empty(len(views), dtype=np.int64)
    for start in range(0, len(views), 2048):
        rows = views[start:start + 2048].astype(np.float64)
        a = rows.sum(axis=1).astype(np.int64) % 65536
        b = (rows @ weights).astype(np.int64) % 65536
        out[start:start + 2048] = a + 65536 * b
    return out


def test_criterion_3_rolling_checksum_oracle(criterion):
    rng = random.Random(SEED + 3)
    bad = checked = 0
    for _ in range(100):
        buf = rng.randbytes(rng.randint(1, 64 * 1024))
        window = rng.randint(1, min(len(buf), 2048))
        direct = _direct_weak_sums(buf, window)
        w = deltasync.weak_sum(buf[:window])
        rolled = [w.value]
        for k in range(len(buf) - window):
            w = deltasync.roll_weak(w, buf[k], buf[k + window], window)
            rolled.append(w.value)
        vector = deltasync.rolling_weak_sums(buf, window)
        checked += len(direct)
        bad += int(np.count_nonzero(np.asarray(rolled) != direct))
        bad += int(np.count_nonzero(vector.astype(np.int64) != direct))
    criterion(3, "rolled weak sums equal direct sums at every offset", bad == 0,
              f"{checked} window offsets over 100 buffers, {bad} disagreements")


def test_criterion_4_policy_enforcement(htc_tree, tmp_path, criterion):
    try:
        start_server(DevicePolicy(rooted=False, port=80), htc_tree, bind_port=0).stop()
        refused = None
    except PolicyError as exc:
        refused = exc.code
    with start_server(default_policy("htc-4.1-nonrooted"), htc_tree, bind_port=0) as srv:
        report = _acquire(srv, tmp_path / "htc.awec")
    expected_skips = sorted((p, "PERM") for p in DEFAULT_DENIED)
    stored = set(ContainerReader.open(tmp_path / "htc.awec").paths())
    allowed = {p for p in htc_tree.paths() if not any(is_under(p, d) for d in DEFAULT_DENIED)}
    passed = refused == "PORT_POLICY" and sorted(report.skipped) == expected_skips and stored == allowed
    criterion(4, "non-rooted port 80 refused and only denied subtrees skipped", passed,
              f"port 80 -> {refused}, skipped {sorted(report.skipped)}, {len(stored)} of {len(allowed)} "
              f"readable entries stored")


def test_criterion_5_footprint_scenario(criterion):
    tree = build_fixture(SEED, "apollo-2.2-rooted", with_agent=False)
    sc = run_install_scenario(tree, AGENT_PACKAGE, AGENT_UID, 1_400_000_000)
    app_dir = f"/data/data/{AGENT_PACKAGE}"
    subtree = {p for p in sc.installed.entries if is_under(p, app_dir)}
    install_ok = app_dir in subtree and sc.install_diff.added == subtree and not sc.install_diff.removed
    uninstall_ok = (sc.uninstall_diff.content_modified == {PACKAGES_LIST, PACKAGES_XML}
                    and sc.uninstall_diff.removed == subtree and not sc.uninstall_diff.added)
    criterion(5, "install adds only the agent subtree, uninstall changes only the two registry files",
              install_ok and uninstall_ok,
              f"added {len(sc.install_diff.added)} paths under {app_dir}; uninstall content changes "
              f"{sorted(sc.uninstall_diff.content_modified)}, removed {len(sc.uninstall_diff.removed)}")


def _two_entry_container():
    header = ContainerHeader("EV-6", "examiner", 1_400_000_000, DeviceInfo("HTC One X", "4.1.1", False, 2222))
    sink = io.BytesIO()
    w = create_container(header, sink, fixed_clock())
    for path, data in (("/sdcard/a.txt", b"first entry payload"), ("/sdcard/b.bin", bytes(range(40)))):
        w.add_entry(path, FileAttr(0o664, 1000, 1015, 1_341_100_000, 7, len(data), Kind.FILE), Fidelity.FULL, data)
    w.seal()
    return sink.getvalue()


def test_criterion_6_container_bit_flips(criterion):
    raw = _two_entry_container()
    sections = ContainerReader(raw).sections()
    undetected, unlocated = [], []
    for bit in range(len(raw) * 8):
        pos = bit // 8
        hit = next(s for s in sections if s.start <= pos < s.end)
        damaged = bytearray(raw)
        damaged[pos] ^= 1 << (bit % 8)
        try:
            report = verify(bytes(damaged))
        except MalformedContainer as exc:
            if exc.offset != hit.start:
                unlocated.append(bit)
            continue
        if report.ok:
            undetected.append(bit)
        elif not any(f.section == hit.kind and f.index == hit.index for f in report.failures):
            unlocated.append(bit)
    criterion(6, "every single-bit flip detected with its section identified",
              not undetected and not unlocated,
              f"{len(raw) * 8} flips, {len(undetected)} undetected, {len(unlocated)} mislocated")


VECTORS = [
    (b"", "d41d8cd98f00b204e9800998ecf8427e", "da39a3ee5e6b4b0d3255bfef95601890afd80709"),
    (b"abc", "900150983cd24fb0d6963f7d28e17f72", "a9993e364706816aba3e25717850c26c9cd0d89d"),
    (b"a" * 1_000_000, "7707d6ae4e027c70eea2a935c2296f21", "34aa973cd4c4daa4f61eeb2bdbad27316534016f"),
]


def test_criterion_7_digest_conformance(criterion):
    bad = []
    for data, md5, sha1 in VECTORS:
        if deltasync.strong_sum(data).hex() != md5 or deltasync.file_checksum(data).hex() != sha1:
            bad.append(len(data))
        # the container digests data while streaming it in chunks
        w = create_container(ContainerHeader("EV-7", "e", 0, DeviceInfo("m", "v", True, 22)), io.BytesIO())
        rec = w.add_entry("/v", FileAttr(0o644, 0, 0, 0, 0, len(data), Kind.FILE), Fidelity.FULL,
                          (data[i:i + 4099] for i in range(0, len(data), 4099)))
        if rec.md5.hex() != md5 or rec.sha1.hex() != sha1:
            bad.append(("stream", len(data)))
    criterion(7, "MD5 and SHA-1 match the standard vectors", not bad,
              f"{len(VECTORS)} vectors, one-shot and streamed, failures {bad}")


def test_criterion_8_deleted_files_absent(apollo_tree, tmp_path, criterion):
    rng = random.Random(SEED + 8)
    deleted = rng.sample([p for p in apollo_tree.files() if is_under(p, "/sdcard")], 25)
    deleted.append("/data/data/com.whatsapp/databases")
    tree = apollo_tree
    for path in deleted:
        tree = tree.without(path)
    with start_server(default_policy("apollo-2.2-rooted"), tree, bind_port=0) as srv:
        _acquire(srv, tmp_path / "c.awec")
    reader = ContainerReader.open(tmp_path / "c.awec")
    stored = set(reader.paths())
    manifest = {row.path for row in reader.manifest.rows}
    leaked = [p for p in stored | manifest if any(is_under(p, d) for d in deleted)]
    passed = not leaked and stored == manifest == set(tree.paths())
    criterion(8, "files deleted before acquisition absent from container and manifest", passed,
              f"{len(deleted)} deletions, {len(leaked)} leaked, {len(stored)} entries stored")


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_criterion_9_determinism(tmp_path, criterion):
    port = _free_port()
    outputs = []
    for run in range(2):
        tree = build_fixture(SEED, "archos-4.0-rooted")
        with start_server(default_policy("archos-4.0-rooted"), tree, bind_port=port) as srv:
            out = tmp_path / f"run{run}.awec"
            _acquire(srv, out)
            outputs.append(out.read_bytes())
    same = outputs[0] == outputs[1]
    criterion(9, "identical inputs give byte-identical containers", same,
              f"{len(outputs[0])} bytes, sha1 {hashlib.sha1(outputs[0]).hexdigest()[:12]} vs "
              f"{hashlib.sha1(outputs[1]).hexdigest()[:12]}")
