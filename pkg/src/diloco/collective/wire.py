"""Bit-exact framing and message payloads.

Every frame is ``b"ODLC" | version u8 | type u8 | payload length u64 LE |
payload``. REDUCE_CHUNK payloads are ``outer_epoch u64 | chunk_index u32 |
precision u8`` followed by one serialized tensor segment whose name carries
the ring phase and attempt (``"rs/3"``, ``"ag/3"``) and whose offset is the
element offset of the chunk inside the full vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from ..tensor import Segment, pack_array, unpack_array

MAGIC = b"ODLC"
VERSION = 1
HEADER = struct.Struct("<4sBBQ")
HEADER_SIZE = HEADER.size  # 14

HELLO, PEER_SET, HEARTBEAT, BARRIER, REDUCE_CHUNK, REDUCE_RESULT, LEAVE, STORE_PUT, STORE_GET = range(1, 10)
TYPE_NAMES = {
    HELLO: "HELLO", PEER_SET: "PEER_SET", HEARTBEAT: "HEARTBEAT", BARRIER: "BARRIER",
    REDUCE_CHUNK: "REDUCE_CHUNK", REDUCE_RESULT: "REDUCE_RESULT", LEAVE: "LEAVE",
    STORE_PUT: "STORE_PUT", STORE_GET: "STORE_GET",
}

PRECISIONS = {"fp32": 0, "fp16": 1}
PRECISION_NAMES = {v: k for k, v in PRECISIONS.items()}
_WIRE_DTYPE = {"fp32": np.float32, "fp16": np.uint16}
STATUS_CODES = {"joining": 0, "live": 1, "suspected": 2, "left": 3}
STATUS_NAMES = {v: k for k, v in STATUS_CODES.items()}

# BARRIER kinds
CHECKIN, REQUEST = 0, 1
# PEER_SET kinds
SNAPSHOT, DECISION = 0, 1
# REDUCE_RESULT kinds
READY, COMMIT = 0, 1


class WireError(ShapeError):
    pass


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _read_str(buf, pos):
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    return bytes(buf[pos:pos + n]).decode("utf-8"), pos + n


def _blob(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def _read_blob(buf, pos):
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    return bytes(buf[pos:pos + n]), pos + n


@dataclass(frozen=True)
class Hello:
    run_id: str
    peer_id: bytes
    address: str
    join: bool = False
    mtype = HELLO

    def pack(self):
        return _str(self.run_id) + self.peer_id + _str(self.address) + bytes([int(self.join)])

    @classmethod
    def unpack(cls, buf):
        run_id, pos = _read_str(buf, 0)
        pid = bytes(buf[pos:pos + 16])
        addr, pos = _read_str(buf, pos + 16)
        return cls(run_id, pid, addr, bool(buf[pos]))


@dataclass(frozen=True)
class PeerRecord:
    peer_id: bytes
    status: str
    address: str


def pack_peers(peers) -> bytes:
    out = [struct.pack("<I", len(peers))]
    for p in peers:
        out += [p.peer_id, bytes([STATUS_CODES[p.status]]), _str(p.address)]
    return b"".join(out)


def unpack_peers(buf, pos=0):
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    peers = []
    for _ in range(n):
        pid = bytes(buf[pos:pos + 16])
        status = STATUS_NAMES[buf[pos + 16]]
        addr, pos = _read_str(buf, pos + 17)
        peers.append(PeerRecord(pid, status, addr))
    return peers, pos


@dataclass(frozen=True)
class PeerSet:
    kind: int
    outer_epoch: int
    attempt: int
    membership_epoch: int
    peers: tuple
    mtype = PEER_SET

    def pack(self):
        return struct.pack("<BQIQ", self.kind, self.outer_epoch, self.attempt,
                           self.membership_epoch) + pack_peers(self.peers)

    @classmethod
    def unpack(cls, buf):
        kind, epoch, attempt, mepoch = struct.unpack_from("<BQIQ", buf, 0)
        peers, _ = unpack_peers(buf, struct.calcsize("<BQIQ"))
        return cls(kind, epoch, attempt, mepoch, tuple(peers))


@dataclass(frozen=True)
class Heartbeat:
    peer_id: bytes
    timestamp: float
    mtype = HEARTBEAT

    def pack(self):
        return self.peer_id + struct.pack("<d", self.timestamp)

    @classmethod
    def unpack(cls, buf):
        return cls(bytes(buf[:16]), struct.unpack_from("<d", buf, 16)[0])


@dataclass(frozen=True)
class Barrier:
    kind: int
    outer_epoch: int
    attempt: int
    mtype = BARRIER

    def pack(self):
        return struct.pack("<BQI", self.kind, self.outer_epoch, self.attempt)

    @classmethod
    def unpack(cls, buf):
        return cls(*struct.unpack_from("<BQI", buf, 0))


@dataclass(frozen=True)
class ReduceChunk:
    outer_epoch: int
    chunk_index: int
    precision: str
    phase: str
    attempt: int
    offset: int
    data: np.ndarray = field(compare=False)
    mtype = REDUCE_CHUNK

    def pack(self):
        seg = (Segment(f"{self.phase}/{self.attempt}", self.offset, int(self.data.size)),)
        head = struct.pack("<QIB", self.outer_epoch, self.chunk_index, PRECISIONS[self.precision])
        return head + pack_array(seg, self.data.astype(_WIRE_DTYPE[self.precision], copy=False))

    @classmethod
    def unpack(cls, buf):
        epoch, index, prec = struct.unpack_from("<QIB", buf, 0)
        precision = PRECISION_NAMES[prec]
        layout, data, end = unpack_array(buf, _WIRE_DTYPE[precision], struct.calcsize("<QIB"),
                                         span_check=False)
        if len(layout) != 1 or end != len(buf):
            raise WireError("REDUCE_CHUNK must carry exactly one segment")
        seg = layout[0]
        phase, attempt = seg.name.split("/")
        return cls(epoch, index, precision, phase, int(attempt), seg.offset, data)


@dataclass(frozen=True)
class ReduceResult:
    kind: int
    outer_epoch: int
    attempt: int
    digest: bytes
    mtype = REDUCE_RESULT

    def pack(self):
        return struct.pack("<BQI", self.kind, self.outer_epoch, self.attempt) + self.digest

    @classmethod
    def unpack(cls, buf):
        kind, epoch, attempt = struct.unpack_from("<BQI", buf, 0)
        return cls(kind, epoch, attempt, bytes(buf[13:45]))


@dataclass(frozen=True)
class Leave:
    peer_id: bytes
    mtype = LEAVE

    def pack(self):
        return self.peer_id

    @classmethod
    def unpack(cls, buf):
        return cls(bytes(buf[:16]))


@dataclass(frozen=True)
class StorePut:
    key: str
    version: int
    value: bytes
    mtype = STORE_PUT

    def pack(self):
        return _str(self.key) + struct.pack("<Q", self.version) + _blob(self.value)

    @classmethod
    def unpack(cls, buf):
        key, pos = _read_str(buf, 0)
        (version,) = struct.unpack_from("<Q", buf, pos)
        value, _ = _read_blob(buf, pos + 8)
        return cls(key, version, value)


@dataclass(frozen=True)
class StoreGet:
    key: str
    mtype = STORE_GET

    def pack(self):
        return _str(self.key)

    @classmethod
    def unpack(cls, buf):
        return cls(_read_str(buf, 0)[0])


_CLASSES = {c.mtype: c for c in (Hello, PeerSet, Heartbeat, Barrier, ReduceChunk,
                                 ReduceResult, Leave, StorePut, StoreGet)}


def encode(msg) -> bytes:
    payload = msg.pack()
    return HEADER.pack(MAGIC, VERSION, msg.mtype, len(payload)) + payload


def decode_header(buf) -> tuple[int, int]:
    """Validate a 14-byte header; returns ``(type, payload_length)``."""
    magic, version, mtype, length = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported wire version {version}")
    if mtype not in _CLASSES:
        raise WireError(f"unknown message type {mtype}")
    return mtype, length


def decode(frame) -> object:
    mtype, length = decode_header(frame)
    if len(frame) != HEADER_SIZE + length:
        raise WireError("frame length does not match header")
    try:
        return _CLASSES[mtype].unpack(memoryview(frame)[HEADER_SIZE:])
    except (struct.error, KeyError, ValueError, IndexError) as exc:
        raise WireError(f"malformed {TYPE_NAMES[mtype]} payload: {exc}") from None


def chunk_frame_size(n_elements: int, precision: str, phase_name_len: int) -> int:
    """Exact frame size of a REDUCE_CHUNK carrying ``n_elements`` scalars."""
    itemsize = np.dtype(_WIRE_DTYPE[precision]).itemsize
    layout_header = 8 + 8 + phase_name_len + 16
    return HEADER_SIZE + 13 + layout_header + n_elements * itemsize
