import io
import random
import socket
import threading

import pytest
from hypothesis import given, settings, strategies as st

from wifiacq import deltasync
from wifiacq._codec import U32
from wifiacq.devicesim import DevicePolicy, FixtureTree, Node, start_server
from wifiacq.errors import FrameError, PathError, RemoteError
from wifiacq.fsmeta import FileAttr, Kind
from wifiacq.wireproto import (
    HEADER_SIZE, MAX_PAYLOAD, MAX_READ, Credentials, DeviceInfo, Frame, Op, Session,
    decode_frame, encode_frame, path_request, read_frame,
)


class TestFrameCodec:
    def test_hello_bytes(self):
        assert encode_frame(0x01, 1, b"") == bytes.fromhex("41574531 01 00000001 00000000")
        assert HEADER_SIZE == 13

    def test_length_field(self):
        raw = encode_frame(0x02, 2, b"root")
        assert raw[9:13] == b"\x00\x00\x00\x04"
        assert raw[13:] == b"root"

    def test_oversize_payload(self):
        with pytest.raises(FrameError) as exc:
            encode_frame(0x05, 1, bytes(MAX_PAYLOAD + 1))
        assert exc.value.code == "OVERSIZE"

    def test_max_payload_accepted(self):
        frame = decode_frame(encode_frame(0x05, 9, bytes(MAX_PAYLOAD)))
        assert len(frame.payload) == MAX_PAYLOAD

    @given(st.integers(0, 255), st.integers(0, 2**32 - 1), st.binary(max_size=2000))
    def test_round_trip(self, ftype, rid, payload):
        raw = encode_frame(ftype, rid, payload)
        frame = decode_frame(raw)
        assert frame == Frame(ftype, rid, payload)
        assert frame.size == len(raw)

    def test_consumes_exactly_one_frame(self):
        raw = encode_frame(3, 7, b"abc") + encode_frame(4, 8, b"")
        first = decode_frame(raw)
        second = decode_frame(raw, first.size)
        assert (first.request_id, second.request_id) == (7, 8)

    @pytest.mark.parametrize("raw", [b"BAD!" + bytes(9), bytes.fromhex("42414421"), b"X"])
    def test_bad_magic(self, raw):
        with pytest.raises(FrameError) as exc:
            decode_frame(raw)
        assert exc.value.code == "PROTO"

    def test_declared_length_over_cap(self):
        raw = b"AWE1" + bytes([1]) + U32.pack(1) + U32.pack(2 << 20)
        with pytest.raises(FrameError) as exc:
            decode_frame(raw)
        assert exc.value.code == "PROTO"

    @given(st.binary(max_size=40), st.data())
    def test_truncation(self, payload, data):
        raw = encode_frame(1, 1, payload)
        cut = data.draw(st.integers(0, len(raw) - 1))
        with pytest.raises(FrameError) as exc:
            decode_frame(raw[:cut])
        assert exc.value.code == "TRUNCATED"

    def test_read_frame_stream(self):
        stream = io.BytesIO(encode_frame(1, 1, b"x") + encode_frame(2, 2, b"yy"))
        assert read_frame(stream).payload == b"x"
        assert read_frame(stream).payload == b"yy"
        assert read_frame(stream) is None

    def test_read_frame_mid_payload_eof(self):
        with pytest.raises(FrameError, match="TRUNCATED"):
            read_frame(io.BytesIO(encode_frame(1, 1, b"abcdef")[:-2]))


class TestValueTypes:
    def test_default_credentials(self):
        assert Credentials() == Credentials("root", "admin")

    @pytest.mark.parametrize("user,password", [("", "x"), ("u" * 65, "x"), ("root", "p" * 65)])
    def test_invalid_credentials(self, user, password):
        with pytest.raises(ValueError):
            Credentials(user, password)

    def test_nonrooted_low_port(self):
        with pytest.raises(ValueError):
            DeviceInfo("HTC One X", "4.1.1", False, 22)
        assert DeviceInfo("Samsung Apollo GT-I5800", "2.2", True, 22).port == 22


# -- live sessions ---------------------------------------------------------------

def connect(server, creds=Credentials()):
    s = Session.connect(server.host, server.port)
    s.handshake(creds)
    return s


@pytest.fixture
def apollo(apollo_server):
    with connect(apollo_server) as s:
        yield s


class TestHandshake:
    def test_default_credentials(self, apollo_server):
        with Session.connect(apollo_server.host, apollo_server.port) as s:
            info = s.handshake(Credentials("root", "admin"))
        assert info == DeviceInfo("Samsung Apollo GT-I5800", "2.2", True, 22)

    def test_wrong_password(self, apollo_server):
        with Session.connect(apollo_server.host, apollo_server.port) as s:
            with pytest.raises(RemoteError) as exc:
                s.handshake(Credentials("root", "wrong"))
            assert exc.value.code == "AUTH_FAIL"
            with pytest.raises(RemoteError, match="PROTO"):
                s.stat("/sdcard")

    def test_stat_before_handshake(self, apollo_server):
        with Session.connect(apollo_server.host, apollo_server.port) as s:
            with pytest.raises(RemoteError) as exc:
                s.stat("/sdcard")
            assert exc.value.code == "PROTO"

    def test_auth_before_hello(self, apollo_server):
        with Session.connect(apollo_server.host, apollo_server.port) as s:
            with pytest.raises(RemoteError, match="PROTO"):
                s.call(Op.AUTH, Credentials().encode())

    @pytest.mark.parametrize("op", [Op.STAT, Op.LIST, Op.READ, Op.DELTA_REQ, Op.DEVINFO])
    def test_every_op_needs_auth(self, apollo_server, op):
        with Session.connect(apollo_server.host, apollo_server.port) as s:
            s.hello()
            with pytest.raises(RemoteError) as exc:
                s.call(op, path_request("/sdcard"))
            assert exc.value.code == "PROTO"

    def test_bad_magic_closes_connection(self, apollo_server):
        with socket.create_connection((apollo_server.host, apollo_server.port)) as sock:
            sock.sendall(b"BAD!" + bytes(9))
            reply = read_frame(sock.makefile("rb"))
            assert reply.payload[0] == 0x04


class TestOperations:
    def test_stat_dir(self, apollo):
        assert apollo.stat("/sdcard").kind == Kind.DIR

    def test_stat_missing(self, apollo):
        with pytest.raises(RemoteError) as exc:
            apollo.stat("/nope")
        assert exc.value.code == "NOT_FOUND"

    def test_traversal_client_side(self, apollo):
        with pytest.raises(PathError) as exc:
            apollo.stat("/data/../etc")
        assert exc.value.code == "TRAVERSAL"

    def test_traversal_server_side(self, apollo):
        with pytest.raises(RemoteError) as exc:
            apollo.call(Op.STAT, path_request("/data/../etc"))
        assert exc.value.code == "TRAVERSAL"

    def test_list_root_sorted(self, apollo):
        names = [n for n, _ in apollo.list_dir("/")]
        assert "data" in names and "sdcard" in names
        assert names == sorted(names, key=lambda n: n.encode())

    def test_list_empty_dir(self, apollo):
        assert apollo.list_dir("/sdcard/empty") == []

    def test_list_file_is_not_dir(self, apollo):
        with pytest.raises(RemoteError) as exc:
            apollo.list_dir("/system/build.prop")
        assert exc.value.code == "NOT_DIR"

    def test_list_matches_fixture(self, apollo, apollo_tree):
        assert apollo.list_dir("/system/bin") == apollo_tree.list_dir("/system/bin")

    def test_read_whole_and_eof(self, apollo, apollo_tree):
        path = "/system/build.prop"
        size = apollo.stat(path).size
        assert apollo.read_chunk(path, 0, size) == apollo_tree.content(path)
        assert apollo.read_chunk(path, size, 100) == b""

    def test_read_dir(self, apollo):
        with pytest.raises(RemoteError) as exc:
            apollo.read_chunk("/sdcard", 0, 10)
        assert exc.value.code == "IS_DIR"

    def test_read_limit(self, apollo):
        with pytest.raises(FrameError):
            apollo.read_chunk("/system/build.prop", 0, MAX_READ + 1)

    @settings(max_examples=25)
    @given(st.integers(64, 30_000))
    def test_chunked_reads_concatenate(self, apollo_server, apollo_tree, chunk):
        path = "/data/system/accounts.db"
        with connect(apollo_server) as s:
            parts, offset = [], 0
            while part := s.read_chunk(path, offset, chunk):
                parts.append(part)
                offset += len(part)
        assert b"".join(parts) == apollo_tree.content(path)

    def test_symlink_not_followed(self, apollo):
        attr = apollo.stat("/sdcard/escape")
        assert attr.kind == Kind.SYMLINK and attr.link_target == "/etc"
        assert apollo.read_file("/sdcard/escape") == b"/etc"
        with pytest.raises(RemoteError, match="NOT_FOUND"):
            apollo.stat("/etc")
        with pytest.raises(RemoteError, match="NOT_FOUND"):
            apollo.stat("/sdcard/escape/passwd")

    def test_large_file_over_several_frames(self, apollo, apollo_tree):
        path = "/sdcard/DCIM/Camera/VID_20130101.mp4"
        data = apollo.read_file(path)
        assert len(data) == 4 << 20 and data == apollo_tree.content(path)


class TestDeltaRequest:
    def test_identity_basis(self, apollo, apollo_tree):
        path = "/data/system/accounts.db"
        data, literal = apollo.fetch(path, apollo_tree.content(path))
        assert data == apollo_tree.content(path) and literal == 0

    def test_empty_basis(self, apollo, apollo_tree):
        path = "/data/system/accounts.db"
        result = apollo.request_delta(path, deltasync.SignatureSet(2048, 0, ()))
        assert all(isinstance(op, deltasync.Literal) for op in result.ops)
        assert b"".join(op.data for op in result.ops) == apollo_tree.content(path)
        assert result.sha1 == deltasync.file_checksum(apollo_tree.content(path))

    def test_big_file_streams_in_pieces(self, apollo, apollo_tree):
        path = "/sdcard/DCIM/Camera/VID_20130101.mp4"
        data, literal = apollo.fetch(path, b"")
        assert data == apollo_tree.content(path) and literal == len(data)

    @settings(max_examples=15)
    @given(st.data())
    def test_any_basis_reconstructs(self, apollo_server, apollo_tree, data):
        files = apollo_tree.files()
        path = data.draw(st.sampled_from(files))
        remote = apollo_tree.content(path)
        basis = data.draw(st.sampled_from([b"", remote[: len(remote) // 2], remote[::-1],
                                           random.Random(len(remote)).randbytes(3000)]))
        with connect(apollo_server) as s:
            got, _ = s.fetch(path, basis, 256)
        assert got == remote

    def test_malformed_signatures(self, apollo):
        with pytest.raises(RemoteError) as exc:
            apollo.call(Op.DELTA_REQ, path_request("/system/build.prop", b"\x00\x01"))
        assert exc.value.code == "PROTO"

    def test_delta_of_missing(self, apollo):
        with pytest.raises(RemoteError, match="NOT_FOUND"):
            apollo.fetch("/missing", b"")


def test_list_paging_over_many_entries():
    nodes = {"/": Node(FileAttr(0o755, 0, 0, 0, 0, 0, Kind.DIR)),
             "/big": Node(FileAttr(0o755, 0, 0, 0, 0, 0, Kind.DIR))}
    for i in range(1300):
        nodes[f"/big/f{i:05d}"] = Node(FileAttr(0o644, 0, 0, 0, 0, 1, Kind.FILE), b"x")
    tree = FixtureTree(nodes, profile="apollo-2.2-rooted")
    with start_server(DevicePolicy(True, 22), tree, bind_port=0) as srv, connect(srv) as s:
        entries = s.list_dir("/big")
    assert [n for n, _ in entries] == [f"f{i:05d}" for i in range(1300)]


def test_concurrent_sessions(apollo_server, apollo_tree):
    paths = apollo_tree.files()[:60]
    errors = []

    def worker(chunk):
        try:
            with connect(apollo_server) as s:
                for p in chunk:
                    assert s.read_file(p) == apollo_tree.content(p)
        except Exception as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(paths[i::4],)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    assert not errors


def test_nonrooted_port_reported(htc_server):
    with connect(htc_server) as s:
        info = s.device_info
    assert (info.android_version, info.rooted, info.port) == ("4.1.1", False, 2222)
