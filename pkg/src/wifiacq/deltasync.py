"""Rolling-checksum delta transfer.

The data holder receives per-block (weak, strong) signatures of the
requester's basis and answers with Copy/Literal instructions that rebuild its
current content from that basis.

Weak sum over a block ``X_1..X_l``::

    a = sum(X_i)                  mod 2**16
    b = sum((l - i + 1) * X_i)    mod 2**16
    s = a + 2**16 * b

which slides one byte in O(1) (see ``roll_weak``).  Blocks are confirmed
with MD5; whole files are verified with SHA-1.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from ._codec import U8, U32, Cursor
from .errors import DeltaError

MOD = 1 << 16
MASK = MOD - 1
DEFAULT_BLOCK_SIZE = 2048
MIN_BLOCK_SIZE = 64
STRONG_LEN = 16

_SIG_HEAD = struct.Struct(">IQI")
_SIG_ENTRY = struct.Struct(">II16sI")
_PREFILTER_MASK = (1 << 24) - 1

TAG_COPY = 0
TAG_LITERAL = 1


@dataclass(frozen=True)
class WeakSum:
    a: int
    b: int

    def __post_init__(self):
        if not (0 <= self.a < MOD and 0 <= self.b < MOD):
            raise ValueError(f"accumulators out of range: {self.a}, {self.b}")

    @property
    def value(self) -> int:
        return self.a + MOD * self.b

    @classmethod
    def from_value(cls, s: int) -> "WeakSum":
        return cls(s & MASK, (s >> 16) & MASK)


def weak_sum(block) -> WeakSum:
    arr = np.frombuffer(bytes(block), dtype=np.uint8).astype(np.int64)
    if arr.size == 0:
        return WeakSum(0, 0)
    weights = np.arange(arr.size, 0, -1, dtype=np.int64)
    return WeakSum(int(arr.sum()) & MASK, int((arr * weights).sum() % MOD))


def roll_weak(w: WeakSum, out_byte: int, in_byte: int, window_len: int) -> WeakSum:
    a = (w.a - out_byte + in_byte) & MASK
    b = (w.b - window_len * out_byte + a) & MASK
    return WeakSum(a, b)


def rolling_weak_sums(data, window: int) -> np.ndarray:
    """Composite weak sum of every ``window``-byte window, as uint32.

    Closed form of repeatedly applying ``roll_weak``: with prefix sums
    ``C[m] = sum(X[:m])`` and ``D[m] = sum(j * X[j] for j < m)`` the window
    at offset ``k`` has ``a = C[k+w] - C[k]`` and
    ``b = (k+w) * a - (D[k+w] - D[k])`` before reduction.
    """
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    n = arr.size
    if window <= 0 or n < window:
        return np.zeros(0, dtype=np.uint32)
    x = arr.astype(np.int64)
    c = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(x, out=c[1:])
    d = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(x * np.arange(n, dtype=np.int64), out=d[1:])
    k = np.arange(n - window + 1, dtype=np.int64)
    a = c[window:] - c[: n - window + 1]
    b = (k + window) * a - (d[window:] - d[: n - window + 1])
    return ((a & MASK) | ((b & MASK) << 16)).astype(np.uint32)


def strong_sum(block) -> bytes:
    return hashlib.md5(bytes(block)).digest()


def file_checksum(data) -> bytes:
    return hashlib.sha1(bytes(data)).digest()


@dataclass(frozen=True)
class BlockSignature:
    index: int
    weak: int
    strong: bytes
    length: int


@dataclass(frozen=True)
class SignatureSet:
    block_size: int
    file_len: int
    signatures: tuple = ()

    def __len__(self):
        return len(self.signatures)

    def validate(self):
        bs = self.block_size
        if bs < MIN_BLOCK_SIZE:
            raise DeltaError("BAD_BLOCK_SIZE", f"block size {bs} < {MIN_BLOCK_SIZE}")
        expected = -(-self.file_len // bs)
        if len(self.signatures) != expected:
            raise DeltaError("BAD_SIGNATURES", f"{len(self.signatures)} signatures for {self.file_len} bytes")
        for i, sig in enumerate(self.signatures):
            full = sig.length == bs
            last = i == expected - 1 and sig.length == self.file_len - i * bs
            if sig.index != i or not (full or last) or len(sig.strong) != STRONG_LEN:
                raise DeltaError("BAD_SIGNATURES", f"signature {i} inconsistent")
        return self


@dataclass(frozen=True)
class Copy:
    block_index: int


@dataclass(frozen=True)
class Literal:
    data: bytes

    def __post_init__(self):
        if not self.data:
            raise DeltaError("EMPTY_LITERAL", "literal ops must carry bytes")


DeltaOp = Union[Copy, Literal]


def _read_all(data) -> bytes:
    if hasattr(data, "read"):
        return data.read()
    return bytes(data)


def build_signatures(data, block_size: int = DEFAULT_BLOCK_SIZE) -> SignatureSet:
    if block_size < MIN_BLOCK_SIZE:
        raise DeltaError("BAD_BLOCK_SIZE", f"block size {block_size} < {MIN_BLOCK_SIZE}")
    buf = _read_all(data)
    full = len(buf) // block_size
    weaks = _block_weak_sums(buf[:full * block_size], block_size).tolist()
    if len(buf) % block_size:
        weaks.append(weak_sum(buf[full * block_size:]).value)
    sigs = tuple(
        BlockSignature(i, weak, strong_sum(buf[i * block_size:(i + 1) * block_size]),
                       min(block_size, len(buf) - i * block_size))
        for i, weak in enumerate(weaks)
    )
    return SignatureSet(block_size, len(buf), sigs)


def _block_weak_sums(buf, block_size) -> np.ndarray:
    """Weak sums of consecutive whole blocks, vectorised."""
    if not buf:
        return np.zeros(0, dtype=np.uint32)
    blocks = np.frombuffer(buf, dtype=np.uint8).reshape(-1, block_size).astype(np.int64)
    weights = np.arange(block_size, 0, -1, dtype=np.int64)
    a = blocks.sum(axis=1) & MASK
    b = (blocks @ weights) & MASK
    return (a | (b << 16)).astype(np.uint32)


def compute_delta(source, sigs: SignatureSet) -> list:
    """Greedy scan of ``source`` against ``sigs``.

    Advances one block on a confirmed match and one byte otherwise.  A short
    final basis block can only match the tail of ``source``.
    """
    src = _read_all(source)
    n = len(src)
    ops: list = []
    if not sigs.signatures:
        if n:
            ops.append(Literal(src))
        return ops

    bs = sigs.block_size
    table: dict = {}
    tail_sig = None
    for sig in sigs.signatures:
        if sig.length == bs:
            table.setdefault(sig.weak, []).append(sig)
        else:
            tail_sig = sig

    lit_start = 0
    next_expected = 0
    if table and n >= bs:
        weaks = rolling_weak_sums(src, bs)
        wanted = np.fromiter(table.keys(), dtype=np.uint32, count=len(table))
        # cheap prefilter on the low bits, exact membership test on survivors
        seen = np.zeros(_PREFILTER_MASK + 1, dtype=bool)
        seen[wanted & _PREFILTER_MASK] = True
        maybe = np.flatnonzero(seen[weaks & _PREFILTER_MASK])
        candidates = maybe[np.isin(weaks[maybe], wanted)]
        ci = 0
        while ci < candidates.size:
            q = int(candidates[ci])
            block = src[q:q + bs]
            strong = strong_sum(block)
            hits = [s for s in table[int(weaks[q])] if s.strong == strong]
            if not hits:
                ci += 1
                continue
            chosen = next((s for s in hits if s.index == next_expected), hits[0])
            if q > lit_start:
                ops.append(Literal(src[lit_start:q]))
            ops.append(Copy(chosen.index))
            next_expected = chosen.index + 1
            lit_start = q + bs
            ci = int(np.searchsorted(candidates, lit_start))

    if tail_sig is not None:
        tail_at = n - tail_sig.length
        if tail_at >= lit_start:
            tail = src[tail_at:]
            if weak_sum(tail).value == tail_sig.weak and strong_sum(tail) == tail_sig.strong:
                if tail_at > lit_start:
                    ops.append(Literal(src[lit_start:tail_at]))
                ops.append(Copy(tail_sig.index))
                lit_start = n
    if lit_start < n:
        ops.append(Literal(src[lit_start:]))
    return ops


def apply_delta(basis, ops: Iterable, sigs: SignatureSet) -> bytes:
    base = _read_all(basis)
    out = bytearray()
    for op in ops:
        if isinstance(op, Copy):
            i = op.block_index
            if not 0 <= i < len(sigs.signatures):
                raise DeltaError("BAD_INDEX", f"copy of block {i} with {len(sigs.signatures)} signatures")
            start = i * sigs.block_size
            end = start + sigs.signatures[i].length
            if end > len(base):
                raise DeltaError("BAD_INDEX", f"block {i} lies beyond basis of {len(base)} bytes")
            out += base[start:end]
        else:
            out += op.data
    return bytes(out)


def literal_bytes(ops: Iterable) -> int:
    return sum(len(op.data) for op in ops if isinstance(op, Literal))


def split_literals(ops: Iterable, max_len: int) -> list:
    """Cut literals into pieces of at most ``max_len`` bytes."""
    out = []
    for op in ops:
        if isinstance(op, Literal) and len(op.data) > max_len:
            view = op.data
            out.extend(Literal(view[i:i + max_len]) for i in range(0, len(view), max_len))
        else:
            out.append(op)
    return out


# -- wire encodings ---------------------------------------------------------

def encode_signatures(sigs: SignatureSet) -> bytes:
    parts = [_SIG_HEAD.pack(sigs.block_size, sigs.file_len, len(sigs.signatures))]
    parts.extend(_SIG_ENTRY.pack(s.index, s.weak, s.strong, s.length) for s in sigs.signatures)
    return b"".join(parts)


def read_signatures(cur: Cursor) -> SignatureSet:
    block_size, file_len, count = _SIG_HEAD.unpack(cur.take(_SIG_HEAD.size))
    if count * _SIG_ENTRY.size > cur.remaining:
        raise cur.error_cls("TRUNCATED", f"{count} signatures declared")
    entries = tuple(
        BlockSignature(*_SIG_ENTRY.unpack(cur.take(_SIG_ENTRY.size))) for _ in range(count)
    )
    return SignatureSet(block_size, file_len, entries)


def decode_signatures(data) -> SignatureSet:
    cur = Cursor(data, error_cls=DeltaError, bad_code="BAD_SIGNATURES")
    sigs = read_signatures(cur)
    if cur.remaining:
        raise DeltaError("BAD_SIGNATURES", f"{cur.remaining} trailing bytes")
    return sigs.validate()


def encode_op(op) -> bytes:
    if isinstance(op, Copy):
        return U8.pack(TAG_COPY) + U32.pack(op.block_index)
    return U8.pack(TAG_LITERAL) + U32.pack(len(op.data)) + op.data


def encode_ops(ops: Sequence) -> bytes:
    return b"".join(encode_op(op) for op in ops)


def read_op(cur: Cursor):
    tag = cur.u8()
    if tag == TAG_COPY:
        return Copy(cur.u32())
    if tag == TAG_LITERAL:
        return Literal(cur.take(cur.u32()))
    raise cur.error_cls(cur.bad_code, f"unknown delta op tag {tag}")


def decode_ops(data) -> list:
    cur = Cursor(data, error_cls=DeltaError, bad_code="BAD_OP")
    ops = []
    while cur.remaining:
        ops.append(read_op(cur))
    return ops
