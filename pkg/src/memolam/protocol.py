"""Binary framing for the memoization service.

Every frame is ``b"MLR1" | msg_type:u8 | payload_len:u32le | payload``.
All integers and floats are little-endian.

=========  ===========  =====================================================
type       name         payload
=========  ===========  =====================================================
1          QUERY_BATCH  tau f32, nprobe u16, count u16, then per key:
                        corr_id u32, key_dim u32, key_dim x f32
2          QUERY_RESP   count u16, then per key: corr_id u32, hit u8, cs f32,
                        value_len u64, value bytes
3          INSERT_BATCH count u16, then per entry: key_dim u32, key f32s,
                        value_len u64, value bytes
4          INSERT_ACK   count u16, then per entry: value_id u64
5          ERROR        code u16, utf-8 message
6 / 7      PING / PONG  empty
=========  ===========  =====================================================
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MLR1"
HEADER = struct.Struct("<4sBI")
HEADER_SIZE = HEADER.size  # 9

QUERY_BATCH, QUERY_RESP, INSERT_BATCH, INSERT_ACK, ERROR, PING, PONG = range(1, 8)

ERR_DIM_MISMATCH = 1
ERR_MALFORMED = 2
ERR_OVERLOAD = 3

MAX_PAYLOAD = 1 << 30


class ProtocolError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _f32(x) -> float:
    return float(np.float32(x))


def _keyvec(v) -> np.ndarray:
    return np.ascontiguousarray(v, dtype="<f4").ravel()


def _same_key(a, b) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class QueryBatch:
    tau: float
    nprobe: int
    keys: list = field(default_factory=list)  # [(corr_id, f32 array)]

    msg_type = QUERY_BATCH

    def __post_init__(self):
        self.tau = _f32(self.tau)
        self.keys = [(int(c), _keyvec(k)) for c, k in self.keys]

    def __eq__(self, other):
        return (isinstance(other, QueryBatch)
                and np.float32(self.tau).tobytes() == np.float32(other.tau).tobytes()
                and self.nprobe == other.nprobe and len(self.keys) == len(other.keys)
                and all(c1 == c2 and _same_key(k1, k2)
                        for (c1, k1), (c2, k2) in zip(self.keys, other.keys)))

    def payload(self) -> bytes:
        parts = [struct.pack("<fHH", self.tau, self.nprobe, len(self.keys))]
        for corr, key in self.keys:
            parts.append(struct.pack("<II", corr, key.size))
            parts.append(key.tobytes())
        return b"".join(parts)

    @staticmethod
    def key_bytes(key_dim: int) -> int:
        """Payload bytes one key occupies in a query batch."""
        return 8 + 4 * key_dim


@dataclass(eq=False)
class QueryResult:
    corr_id: int
    hit: bool
    cs: float
    value: bytes = b""

    def __post_init__(self):
        self.cs = _f32(self.cs)
        self.hit = bool(self.hit)
        self.value = bytes(self.value)

    def __eq__(self, other):
        return (isinstance(other, QueryResult) and self.corr_id == other.corr_id
                and self.hit == other.hit
                and np.float32(self.cs).tobytes() == np.float32(other.cs).tobytes()
                and self.value == other.value)


@dataclass
class QueryResp:
    results: list = field(default_factory=list)

    msg_type = QUERY_RESP

    def payload(self) -> bytes:
        parts = [struct.pack("<H", len(self.results))]
        for r in self.results:
            parts.append(struct.pack("<IBfQ", r.corr_id, int(r.hit), r.cs, len(r.value)))
            parts.append(r.value)
        return b"".join(parts)


@dataclass(eq=False)
class InsertBatch:
    entries: list = field(default_factory=list)  # [(f32 array, bytes)]

    msg_type = INSERT_BATCH

    def __post_init__(self):
        self.entries = [(_keyvec(k), bytes(v)) for k, v in self.entries]

    def __eq__(self, other):
        return (isinstance(other, InsertBatch) and len(self.entries) == len(other.entries)
                and all(_same_key(k1, k2) and v1 == v2
                        for (k1, v1), (k2, v2) in zip(self.entries, other.entries)))

    def payload(self) -> bytes:
        parts = [struct.pack("<H", len(self.entries))]
        for key, value in self.entries:
            parts.append(struct.pack("<I", key.size))
            parts.append(key.tobytes())
            parts.append(struct.pack("<Q", len(value)))
            parts.append(value)
        return b"".join(parts)


@dataclass
class InsertAck:
    ids: list = field(default_factory=list)

    msg_type = INSERT_ACK

    def payload(self) -> bytes:
        return struct.pack(f"<H{len(self.ids)}Q", len(self.ids), *self.ids)


@dataclass
class Error:
    code: int
    message: str = ""

    msg_type = ERROR

    def payload(self) -> bytes:
        return struct.pack("<H", self.code) + self.message.encode("utf-8")


@dataclass
class Ping:
    msg_type = PING

    def payload(self) -> bytes:
        return b""


@dataclass
class Pong:
    msg_type = PONG

    def payload(self) -> bytes:
        return b""


def encode(msg) -> bytes:
    body = msg.payload()
    if len(body) > 0xFFFFFFFF:
        raise ValueError("payload too large for a u32 length")
    return HEADER.pack(MAGIC, msg.msg_type, len(body)) + body


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise ProtocolError(ERR_MALFORMED, "payload truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def done(self):
        if self.pos != len(self.data):
            raise ProtocolError(ERR_MALFORMED, f"{len(self.data) - self.pos} trailing bytes")


def decode_payload(msg_type: int, payload: bytes):
    r = _Reader(payload)
    if msg_type == QUERY_BATCH:
        tau, nprobe, count = r.unpack("<fHH")
        keys = []
        for _ in range(count):
            corr, dim = r.unpack("<II")
            keys.append((corr, np.frombuffer(r.take(4 * dim), dtype="<f4")))
        msg = QueryBatch(tau, nprobe, keys)
    elif msg_type == QUERY_RESP:
        (count,) = r.unpack("<H")
        results = []
        for _ in range(count):
            corr, hit, cs, vlen = r.unpack("<IBfQ")
            if hit > 1:
                raise ProtocolError(ERR_MALFORMED, "hit flag must be 0 or 1")
            results.append(QueryResult(corr, hit, cs, bytes(r.take(vlen))))
        msg = QueryResp(results)
    elif msg_type == INSERT_BATCH:
        (count,) = r.unpack("<H")
        entries = []
        for _ in range(count):
            (dim,) = r.unpack("<I")
            key = np.frombuffer(r.take(4 * dim), dtype="<f4")
            (vlen,) = r.unpack("<Q")
            entries.append((key, bytes(r.take(vlen))))
        msg = InsertBatch(entries)
    elif msg_type == INSERT_ACK:
        (count,) = r.unpack("<H")
        msg = InsertAck(list(r.unpack(f"<{count}Q")))
    elif msg_type == ERROR:
        (code,) = r.unpack("<H")
        try:
            text = bytes(r.take(len(payload) - 2)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(ERR_MALFORMED, "error message is not utf-8") from exc
        msg = Error(code, text)
    elif msg_type == PING:
        msg = Ping()
    elif msg_type == PONG:
        msg = Pong()
    else:
        raise ProtocolError(ERR_MALFORMED, f"unknown message type {msg_type}")
    r.done()
    return msg


def decode(frame: bytes):
    """Decode exactly one complete frame."""
    if len(frame) < HEADER_SIZE:
        raise ProtocolError(ERR_MALFORMED, "short header")
    magic, msg_type, length = HEADER.unpack(frame[:HEADER_SIZE])
    if magic != MAGIC:
        raise ProtocolError(ERR_MALFORMED, "bad magic")
    if len(frame) != HEADER_SIZE + length:
        raise ProtocolError(ERR_MALFORMED, "frame length mismatch")
    return decode_payload(msg_type, frame[HEADER_SIZE:])


def _read_exact(stream, n: int) -> bytes | None:
    """``n`` bytes, ``None`` at a clean end, ``ProtocolError`` when cut short."""
    chunks = []
    remaining = n
    while remaining:
        part = stream.read(remaining)
        if not part:
            if remaining == n:
                return None
            raise ProtocolError(ERR_MALFORMED, "stream ended mid-frame")
        chunks.append(part)
        remaining -= len(part)
    return b"".join(chunks)


def read_frame(stream, max_payload: int = MAX_PAYLOAD):
    """Read one frame from a binary stream.

    Returns ``(msg_type, payload)`` or ``None`` on a clean end of stream.
    Raises :class:`ProtocolError` when the stream cannot be resynchronised
    (bad magic, oversize length) or ends mid-frame.
    """
    head = _read_exact(stream, HEADER_SIZE)
    if head is None:
        return None
    magic, msg_type, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(ERR_MALFORMED, "bad magic")
    if length > max_payload:
        raise ProtocolError(ERR_OVERLOAD, f"payload of {length} bytes exceeds limit")
    payload = _read_exact(stream, length)
    if payload is None:
        raise ProtocolError(ERR_MALFORMED, "stream ended mid-frame")
    return msg_type, payload
