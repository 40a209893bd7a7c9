"""Examiner-facing acquisition pipeline and command line.

``acquire`` connects to a device agent, walks the requested directory in
sorted order, pulls every file through the delta protocol and seals the
result into an evidence container.  Every action lands in the container's
audit log.
"""

from __future__ import annotations

import argparse
import getpass
import logging
import re
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from . import deltasync
from .devicesim import PROFILES, build_fixture, default_policy, PolicyView, start_server
from .errors import AccessError, AcqError, AcquisitionError, ContainerError, FrameError, RemoteError
from .evidence import ContainerHeader, ContainerReader, DigestMismatchWarning, create_container, verify
from .fsmeta import Fidelity, check_path, degrade, join
from .footprint import Snapshot, capture_snapshot, diff_snapshots
from .wireproto import DEFAULT_PASSWORD, DEFAULT_USER, NONROOTED_PORT, Credentials, Session

log = logging.getLogger(__name__)

SKIP_REASONS = ("PERM", "NOT_FOUND", "EXCLUDED")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONNECT = 2
EXIT_VERIFY = 3
EXIT_PARTIAL = 4


@dataclass
class AcquisitionConfig:
    evidence_number: str
    host: str
    output_path: str
    port: int = NONROOTED_PORT
    credentials: Credentials = field(default_factory=Credentials)
    root_path: str = "/"
    exclude_patterns: list = field(default_factory=list)
    include_patterns: list = field(default_factory=list)
    block_size: int = deltasync.DEFAULT_BLOCK_SIZE
    resume_basis: Optional[str] = None
    examiner: str = "examiner"
    fidelity: Fidelity = Fidelity.FULL
    timeout: float = 10.0

    def validate(self):
        if not self.evidence_number:
            raise AcquisitionError("INVALID_CONFIG", "evidence number is required")
        if self.block_size < deltasync.MIN_BLOCK_SIZE:
            raise AcquisitionError("INVALID_CONFIG", f"block size must be at least {deltasync.MIN_BLOCK_SIZE}")
        if not 0 < self.port <= 0xFFFF:
            raise AcquisitionError("INVALID_CONFIG", f"port {self.port}")
        check_path(self.root_path)
        return self


@dataclass
class AcquisitionReport:
    files_stored: int
    bytes_total: int
    bytes_literal: int
    skipped: list
    duration_ms: int
    seal_sha1: bytes
    fidelity: Fidelity
    entries_stored: int = 0


# -- path globs ---------------------------------------------------------------

def compile_glob(pattern: str) -> re.Pattern:
    """``*`` stays inside one segment, ``**`` spans segments.

    Patterns without a leading '/' may match at any depth.
    """
    if not pattern.startswith("/"):
        pattern = "**/" + pattern
    out = []
    i = 0
    while i < len(pattern):
        if pattern.startswith("**/", i):
            out.append("(?:.*/)?")
            i += 3
        elif pattern.startswith("**", i):
            out.append(".*")
            i += 2
        elif pattern[i] == "*":
            out.append("[^/]*")
            i += 1
        elif pattern[i] == "?":
            out.append("[^/]")
            i += 1
        else:
            out.append(re.escape(pattern[i]))
            i += 1
    return re.compile("".join(out))


class PathFilter:
    """Includes select non-directory entries first; excludes override."""

    def __init__(self, include=(), exclude=()):
        self.include = [compile_glob(p) for p in include]
        self.exclude = [compile_glob(p) for p in exclude]

    def excluded(self, path: str, is_dir: bool) -> bool:
        if any(rx.fullmatch(path) for rx in self.exclude):
            return True
        if self.include and not is_dir:
            return not any(rx.fullmatch(path) for rx in self.include)
        return False


# -- interactive configuration ------------------------------------------------

def run_interactive(ask: Optional[Callable[[str], str]] = None, say: Callable[[str], None] = print,
                    ask_secret: Optional[Callable[[str], str]] = None,
                    output_path: Optional[str] = None) -> AcquisitionConfig:
    """Prompt for each setting, re-asking on invalid input, then confirm.

    Raises ``AcquisitionError("ABORTED")`` when the operator cancels.
    """
    ask = ask or input
    ask_secret = ask_secret or ask

    def prompt(label, default=None, parse=str, secret=False):
        suffix = f" [{default}]" if default is not None else ""
        while True:
            try:
                raw = (ask_secret if secret else ask)(f"{label}{suffix}: ").strip()
            except (EOFError, KeyboardInterrupt):
                raise AcquisitionError("ABORTED", "operator cancelled") from None
            if not raw and default is not None:
                raw = str(default)
            try:
                return parse(raw)
            except ValueError as exc:
                say(f"invalid {label.lower()}: {exc}")

    def nonempty(text):
        if not text:
            raise ValueError("a value is required")
        return text

    def port(text):
        value = int(text)
        if not 0 < value <= 0xFFFF:
            raise ValueError("port must be 1-65535")
        return value

    def device_dir(text):
        try:
            return check_path(text)
        except AccessError as exc:
            raise ValueError(exc.code) from None

    def patterns(text):
        return [p.strip() for p in text.split(",") if p.strip()]

    evidence = prompt("Evidence number", parse=nonempty)
    host = prompt("Device IP address", parse=nonempty)
    port_no = prompt("SSH port", NONROOTED_PORT, port)
    user = prompt("Username", DEFAULT_USER, nonempty)
    password = prompt("Password", DEFAULT_PASSWORD, secret=True)
    directory = prompt("Directory to back up", "/", device_dir)
    excludes = prompt("Exclusions (comma separated globs)", "", patterns)

    config = AcquisitionConfig(
        evidence_number=evidence, host=host, port=port_no,
        credentials=Credentials(user, password), root_path=directory,
        exclude_patterns=excludes, output_path=output_path or f"{evidence}.awec",
    )
    say("About to acquire:")
    say(f"  evidence number: {evidence}")
    say(f"  device:          {host}:{port_no} as {user}")
    say(f"  directory:       {directory}")
    say(f"  exclusions:      {', '.join(excludes) or '(none)'}")
    say(f"  output:          {config.output_path}")
    answer = prompt("Proceed? (y/n)", "y", lambda t: t.lower())
    if answer not in ("y", "yes"):
        raise AcquisitionError("ABORTED", "operator declined")
    return config


# -- acquisition ----------------------------------------------------------------

def _basis_for(reader: Optional[ContainerReader], path: str) -> bytes:
    if reader is None:
        return b""
    try:
        entry = reader.find(path)
    except ContainerError:
        return b""
    if not entry.attrs.is_file or not entry.content_intact():
        return b""
    return bytes(entry.data)


def acquire(config: AcquisitionConfig, clock: Callable[[], float] = time.time) -> AcquisitionReport:
    """Acquire ``config.root_path`` into a new sealed container at ``config.output_path``."""
    config.validate()
    started = time.monotonic()
    out = Path(config.output_path)
    if out.exists():
        raise AcquisitionError("OUTPUT_EXISTS", str(out))
    basis = ContainerReader.open(config.resume_basis) if config.resume_basis else None
    path_filter = PathFilter(config.include_patterns, config.exclude_patterns)

    try:
        session = Session.connect(config.host, config.port, config.timeout)
    except OSError as exc:
        raise AcquisitionError("CONNECT_FAILED", f"{config.host}:{config.port}: {exc}") from None

    with session:
        try:
            info = session.handshake(config.credentials)
        except RemoteError as exc:
            raise AcquisitionError(exc.code, f"handshake refused: {exc.message}") from None
        except (FrameError, OSError) as exc:
            raise AcquisitionError("CONNECT_FAILED", f"handshake failed: {exc}") from None

        header = ContainerHeader(config.evidence_number, config.examiner, int(clock()), info)
        try:
            writer = create_container(header, out, clock)
        except ContainerError as exc:
            raise AcquisitionError(exc.code, exc.message) from None
        writer.append_audit(f"connected to {config.host}:{config.port}")
        writer.append_audit(f"authenticated as {config.credentials.username}")
        writer.append_audit(f"device {info.model}, Android {info.android_version}, "
                            f"{'rooted' if info.rooted else 'non-rooted'}, agent port {info.port}")
        if basis is not None:
            writer.append_audit(f"resume basis {config.resume_basis} with {len(basis.entries)} entries")
        writer.append_audit(f"acquiring {config.root_path} at {Fidelity(config.fidelity).name} fidelity, "
                            f"block size {config.block_size}")

        skipped = []
        totals = {"files": 0, "bytes": 0, "literal": 0}

        def skip(path, reason):
            skipped.append((path, reason))
            writer.append_audit(f"skipped {path} ({reason})")

        def store(path, attr, data=b""):
            if config.fidelity == Fidelity.CONTENT_ONLY:
                attr = degrade(attr, int(clock()))
            writer.add_entry(path, attr, config.fidelity, data)

        def visit(path, attr):
            if path_filter.excluded(path, attr.is_dir):
                skip(path, "EXCLUDED")
                return
            try:
                if attr.is_dir:
                    children = session.list_dir(path)
                    store(path, attr)
                    for name, child in children:
                        visit(join(path, name), child)
                elif attr.is_symlink:
                    store(path, attr)
                else:
                    data, literal = session.fetch(path, _basis_for(basis, path), config.block_size)
                    if len(data) != attr.size:
                        attr = session.stat(path)
                    store(path, attr, data)
                    totals["files"] += 1
                    totals["bytes"] += len(data)
                    totals["literal"] += literal
            except RemoteError as exc:
                if exc.code not in ("PERM", "NOT_FOUND"):
                    raise
                skip(path, exc.code)

        try:
            root_attr = session.stat(config.root_path)
        except RemoteError as exc:
            if exc.code not in ("PERM", "NOT_FOUND"):
                raise
            skip(config.root_path, exc.code)
        else:
            visit(config.root_path, root_attr)

        writer.append_audit(f"finished: {totals['files']} files, {totals['bytes']} bytes, "
                            f"{totals['literal']} literal bytes, {len(skipped)} skipped")
        entries_stored = len(writer.entries())
        seal = writer.seal()

    check = verify(ContainerReader.open(out))
    if not check.ok:
        raise AcquisitionError("VERIFY_FAILED", "; ".join(str(f) for f in check.failures))
    return AcquisitionReport(
        files_stored=totals["files"],
        bytes_total=totals["bytes"],
        bytes_literal=totals["literal"],
        skipped=skipped,
        duration_ms=int((time.monotonic() - started) * 1000),
        seal_sha1=seal.sha1,
        fidelity=Fidelity(config.fidelity),
        entries_stored=entries_stored,
    )


def write_report(report: AcquisitionReport, format: str = "text") -> bytes:
    if format in ("kv", "machine"):
        lines = [
            f"files_stored={report.files_stored}",
            f"entries_stored={report.entries_stored}",
            f"bytes_total={report.bytes_total}",
            f"bytes_literal={report.bytes_literal}",
            f"duration_ms={report.duration_ms}",
            f"seal_sha1={report.seal_sha1.hex()}",
            f"fidelity={report.fidelity.name}",
            f"skipped_count={len(report.skipped)}",
        ]
        lines += [f"skipped.{i}={reason} {path}" for i, (path, reason) in enumerate(report.skipped)]
    elif format == "text":
        lines = [
            "Acquisition report",
            f"  fidelity:       {report.fidelity.name}",
            f"  files stored:   {report.files_stored}",
            f"  entries stored: {report.entries_stored}",
            f"  bytes total:    {report.bytes_total}",
            f"  bytes literal:  {report.bytes_literal}",
            f"  duration ms:    {report.duration_ms}",
            f"  seal sha1:      {report.seal_sha1.hex()}",
        ]
        if report.skipped:
            lines.append(f"Skipped ({len(report.skipped)}):")
            lines += [f"  {reason:<9} {path}" for path, reason in report.skipped]
    else:
        raise ValueError(f"unknown report format {format!r}")
    return ("\n".join(lines) + "\n").encode("utf-8")


# -- command line -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser():
    parser = _Parser(prog="wifiacq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("acquire", help="acquire a device directory into a sealed container")
    p.add_argument("--evidence")
    p.add_argument("--host")
    p.add_argument("--port", type=int, default=NONROOTED_PORT)
    p.add_argument("--user", default=DEFAULT_USER)
    p.add_argument("--password", default=DEFAULT_PASSWORD)
    p.add_argument("--dir", default="/")
    p.add_argument("--exclude", action="append", default=[])
    p.add_argument("--include", action="append", default=[])
    p.add_argument("--resume", help="earlier container to use as delta basis")
    p.add_argument("--out")
    p.add_argument("--block-size", type=int, default=deltasync.DEFAULT_BLOCK_SIZE)
    p.add_argument("--examiner", default=None)
    p.add_argument("--content-only", action="store_true", help="store content with defaulted attributes")
    p.add_argument("--strict", action="store_true", help="exit 4 when anything was skipped")
    p.add_argument("--report-format", choices=("text", "kv"), default="text")
    p.add_argument("--fixed-time", type=int, help="use this unix time for every timestamp")
    p.add_argument("--interactive", action="store_true")

    p = sub.add_parser("verify", help="check every digest and the seal")
    p.add_argument("container")

    p = sub.add_parser("list", help="list container entries")
    p.add_argument("container")

    p = sub.add_parser("extract", help="write one entry's bytes")
    p.add_argument("container")
    p.add_argument("path")
    p.add_argument("-o", "--output")

    p = sub.add_parser("snapshot", help="snapshot a directory tree")
    p.add_argument("--host")
    p.add_argument("--port", type=int, default=NONROOTED_PORT)
    p.add_argument("--user", default=DEFAULT_USER)
    p.add_argument("--password", default=DEFAULT_PASSWORD)
    p.add_argument("--profile", choices=sorted(PROFILES), help="snapshot a local fixture instead")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--root", default="/data")
    p.add_argument("--label", default="")
    p.add_argument("-o", "--output")

    p = sub.add_parser("diff", help="compare two snapshot files")
    p.add_argument("before")
    p.add_argument("after")

    p = sub.add_parser("simulate", help="serve a simulated device")
    p.add_argument("--profile", choices=sorted(PROFILES), default="htc-4.1-nonrooted")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, help="configured agent port (policy-checked)")
    p.add_argument("--bind-port", type=int, help="listen here instead of --port")
    p.add_argument("--no-agent", action="store_true")
    return parser


def _cmd_acquire(args):
    clock = (lambda: args.fixed_time) if args.fixed_time is not None else time.time
    if args.interactive or not (args.evidence and args.host):
        config = run_interactive(ask_secret=getpass.getpass, output_path=args.out,
                                 say=lambda s: print(s, file=sys.stderr))
        config.block_size = args.block_size
        config.resume_basis = args.resume
        config.include_patterns = list(args.include)
    else:
        config = AcquisitionConfig(
            evidence_number=args.evidence, host=args.host, port=args.port,
            credentials=Credentials(args.user, args.password), root_path=args.dir,
            exclude_patterns=list(args.exclude), include_patterns=list(args.include),
            block_size=args.block_size, resume_basis=args.resume,
            output_path=args.out or f"{args.evidence}.awec",
        )
    config.examiner = args.examiner or getpass.getuser()
    if args.content_only:
        config.fidelity = Fidelity.CONTENT_ONLY
    report = acquire(config, clock)
    sys.stdout.buffer.write(write_report(report, args.report_format))
    return EXIT_PARTIAL if args.strict and report.skipped else EXIT_OK


def _cmd_verify(args):
    report = verify(ContainerReader.open(args.container))
    for failure in report.failures:
        print(f"FAILED {failure}")
    print(f"{'OK' if report.ok else 'FAILED'}: {report.entries} entries, {report.audits} audit records")
    return EXIT_OK if report.ok else EXIT_VERIFY


def _cmd_list(args):
    reader = ContainerReader.open(args.container)
    h = reader.header
    print(f"# evidence {h.evidence_number} examiner {h.examiner} created {h.created_at} "
          f"device {h.device_info.model} ({h.device_info.android_version})")
    for path in reader.paths():
        e = reader.find(path)
        a = e.attrs
        extra = f" -> {a.link_target}" if a.is_symlink else ""
        print(f"{a.kind.name.lower():7} {a.mode:04o} {a.uid:>6} {a.gid:>6} {a.size:>10} "
              f"{a.mtime_sec}.{a.mtime_nsec:09d} {e.md5.hex()} {e.fidelity.name} {path}{extra}")
    return EXIT_OK


def _cmd_extract(args):
    import warnings
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DigestMismatchWarning)
        entry = ContainerReader.open(args.container).read_entry(args.path)
    if args.output:
        Path(args.output).write_bytes(entry.data)
    else:
        sys.stdout.buffer.write(entry.data)
    if caught or not entry.intact:
        print(f"warning: digest mismatch for {args.path}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _cmd_snapshot(args):
    if args.profile:
        tree = build_fixture(args.seed, args.profile)
        snap = capture_snapshot(PolicyView(tree, default_policy(args.profile)), args.root, args.label)
    elif args.host:
        try:
            session = Session.connect(args.host, args.port)
        except OSError as exc:
            raise AcquisitionError("CONNECT_FAILED", str(exc)) from None
        with session:
            try:
                session.handshake(Credentials(args.user, args.password))
            except RemoteError as exc:
                raise AcquisitionError(exc.code, exc.message) from None
            snap = capture_snapshot(session, args.root, args.label)
    else:
        raise AcquisitionError("USAGE", "snapshot needs --host or --profile")
    text = snap.to_text()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_diff(args):
    before = Snapshot.from_text(Path(args.before).read_text(encoding="utf-8"))
    after = Snapshot.from_text(Path(args.after).read_text(encoding="utf-8"))
    d = diff_snapshots(before, after)
    for path in sorted(d.added):
        print(f"+ {path}")
    for path in sorted(d.removed):
        print(f"- {path}")
    for path in sorted(d.modified):
        print(f"M {path} ({', '.join(sorted(d.modified[path]))})")
    return EXIT_OK


def _cmd_simulate(args):
    tree = build_fixture(args.seed, args.profile, with_agent=not args.no_agent)
    policy = default_policy(args.profile)
    if args.port is not None:
        policy = replace(policy, port=args.port)
    handle = start_server(policy, tree, host=args.host, bind_port=args.bind_port)
    print(f"serving {args.profile} (seed {args.seed}) on {handle.host}:{handle.port}; Ctrl-C to stop",
          flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        handle.stop()
    return EXIT_OK


_COMMANDS = {
    "acquire": _cmd_acquire, "verify": _cmd_verify, "list": _cmd_list, "extract": _cmd_extract,
    "snapshot": _cmd_snapshot, "diff": _cmd_diff, "simulate": _cmd_simulate,
}

_EXIT_FOR = {"CONNECT_FAILED": EXIT_CONNECT, "AUTH_FAIL": EXIT_CONNECT, "VERIFY_FAILED": EXIT_VERIFY,
             "MALFORMED": EXIT_VERIFY}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except AcqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_FOR.get(exc.code, EXIT_USAGE)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
