"""
Wire codec shared by the simulator and the socket mode.

Frame format::

    +----------+----------+------------------+
    | len (4B) | type(1B) | payload          |
    | u32 BE   | u8       | message specific |
    +----------+----------+------------------+

``len`` counts the type byte plus the payload, not the prefix itself.
All integers are big-endian.
"""

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import ClassVar, Dict, List, Optional, Tuple, Type, Union

from ..errors import FrameError, NeedMoreData
from ..models.measurement import LatencySample, MeasurementReport, SampleStatus
from ..models.scenario import NodeId, Role

LENGTH_PREFIX_SIZE = 4
TYPE_BYTE_SIZE = 1
HEADER_SIZE = LENGTH_PREFIX_SIZE + TYPE_BYTE_SIZE
MAX_PAYLOAD = 1 << 20

PING_FRAME_SIZE = 1500
_PING_PAD = PING_FRAME_SIZE - HEADER_SIZE - 4
_PING_TAIL = bytes(_PING_PAD)
_SEQ = struct.Struct(">I")

NO_LATENCY = 0xFFFFFFFF
LOAD_SCALE = 65535

_ROLE_TO_BYTE = {Role.OH: 1, Role.EH: 2, Role.MH: 3}
_BYTE_TO_ROLE = {v: k for k, v in _ROLE_TO_BYTE.items()}

_STATUS_TO_BYTE = {SampleStatus.OK: 0, SampleStatus.CONN_FAILED: 1, SampleStatus.TIMED_OUT: 2}
_BYTE_TO_STATUS = {v: k for k, v in _STATUS_TO_BYTE.items()}


class MsgType(IntEnum):
    HELLO = 0x01
    PING = 0x02
    PONG = 0x03
    MEAS_REPORT = 0x04
    ASSIGN = 0x05
    REJECT = 0x06
    LOAD_REPORT = 0x07
    DATA = 0x08
    BYE = 0x09
    PEER_MEAS = 0x0A
    LINK_REPORT = 0x0B
    DIRECTORY = 0x0C


class Hop(IntEnum):
    SOURCE = 0
    PEER = 1


def _unpack(fmt: str, payload: bytes, offset: int = 0) -> tuple:
    try:
        return struct.unpack_from(fmt, payload, offset)
    except struct.error as e:
        raise FrameError(f"truncated payload: {e}") from None


def _utf8(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FrameError(f"invalid utf-8: {e}") from None


def _latency_field(value: Optional[int]) -> int:
    if value is None:
        return NO_LATENCY
    if not 0 <= value < NO_LATENCY:
        raise FrameError(f"latency {value} us out of range")
    return value


@dataclass(frozen=True)
class Hello:
    TYPE: ClassVar[MsgType] = MsgType.HELLO
    node: NodeId
    listen: Optional[str] = None

    def pack(self) -> bytes:
        addr = self.listen.encode("utf-8") if self.listen else b""
        return struct.pack(">IB", self.node.id, _ROLE_TO_BYTE[self.node.role]) + addr

    @classmethod
    def unpack(cls, payload: bytes) -> "Hello":
        node_id, role = _unpack(">IB", payload)
        if role not in _BYTE_TO_ROLE:
            raise FrameError(f"unknown role byte {role}")
        listen = _utf8(payload[5:]) or None
        return cls(NodeId(_BYTE_TO_ROLE[role], node_id), listen)


@dataclass(frozen=True)
class Ping:
    """Probe; always a full 1500-byte frame on the wire."""

    TYPE: ClassVar[MsgType] = MsgType.PING
    seq: int

    def pack(self) -> bytes:
        return _SEQ.pack(self.seq) + _PING_TAIL

    @classmethod
    def unpack(cls, payload: bytes) -> "Ping":
        if len(payload) != 4 + _PING_PAD:
            raise FrameError(f"ping payload must be {4 + _PING_PAD} bytes, got {len(payload)}")
        return cls(_unpack(">I", payload)[0])


@dataclass(frozen=True)
class Pong:
    TYPE: ClassVar[MsgType] = MsgType.PONG
    seq: int

    def pack(self) -> bytes:
        return _SEQ.pack(self.seq)

    @classmethod
    def unpack(cls, payload: bytes) -> "Pong":
        return cls(_unpack(">I", payload)[0])


_SAMPLE_HEAD = struct.Struct(">IBd")
_LATS = struct.Struct(">ddd")
_ELAPSED = struct.Struct(">d")


@dataclass(frozen=True)
class MeasReport:
    """
    Serialized MeasurementReport.

    Layout: eh u32, m_i f64, count u16, then per sample
    oh u32, status u8, conn f64 and either three latencies or the elapsed time.
    """

    TYPE: ClassVar[MsgType] = MsgType.MEAS_REPORT
    report: MeasurementReport

    def pack(self) -> bytes:
        r = self.report
        parts = [struct.pack(">IdH", r.eh.id, r.m_i_ms, len(r.samples))]
        for s in r.samples:
            parts.append(_SAMPLE_HEAD.pack(s.oh.id, _STATUS_TO_BYTE[s.status], s.conn_ms))
            parts.append(_LATS.pack(*s.lat_ms) if s.is_ok else _ELAPSED.pack(s.elapsed_ms))
        return b"".join(parts)

    @classmethod
    def unpack(cls, payload: bytes) -> "MeasReport":
        eh, m_i, count = _unpack(">IdH", payload)
        offset = struct.calcsize(">IdH")
        samples = []
        for _ in range(count):
            oh, status_byte, conn = _unpack(_SAMPLE_HEAD.format, payload, offset)
            offset += _SAMPLE_HEAD.size
            status = _BYTE_TO_STATUS.get(status_byte)
            if status is None:
                raise FrameError(f"unknown sample status {status_byte}")
            if status is SampleStatus.OK:
                lats = _unpack(_LATS.format, payload, offset)
                offset += _LATS.size
                sample = LatencySample(oh=NodeId.oh(oh), conn_ms=conn, lat_ms=lats)
            else:
                (elapsed,) = _unpack(_ELAPSED.format, payload, offset)
                offset += _ELAPSED.size
                sample = LatencySample(oh=NodeId.oh(oh), status=status, conn_ms=conn, elapsed_ms=elapsed)
            samples.append(sample)
        if offset != len(payload):
            raise FrameError(f"{len(payload) - offset} trailing bytes in report")
        try:
            report = MeasurementReport(eh=NodeId.eh(eh), samples=tuple(samples), m_i_ms=m_i)
        except ValueError as e:
            raise FrameError(f"invalid report: {e}") from None
        return cls(report)


@dataclass(frozen=True)
class Assign:
    TYPE: ClassVar[MsgType] = MsgType.ASSIGN
    oh: NodeId

    def pack(self) -> bytes:
        return struct.pack(">I", self.oh.id)

    @classmethod
    def unpack(cls, payload: bytes) -> "Assign":
        return cls(NodeId.oh(_unpack(">I", payload)[0]))


@dataclass(frozen=True)
class Reject:
    TYPE: ClassVar[MsgType] = MsgType.REJECT
    reason: str = ""

    def pack(self) -> bytes:
        return self.reason.encode("utf-8")

    @classmethod
    def unpack(cls, payload: bytes) -> "Reject":
        return cls(_utf8(payload))


@dataclass(frozen=True)
class LoadReport:
    """Load scaled to a 16-bit level: ``round(load * 65535)``."""

    TYPE: ClassVar[MsgType] = MsgType.LOAD_REPORT
    level: int

    @classmethod
    def from_load(cls, load: float) -> "LoadReport":
        if not 0.0 <= load <= 1.0:
            raise FrameError(f"load {load} outside [0, 1]")
        return cls(round(load * LOAD_SCALE))

    @property
    def load(self) -> float:
        return self.level / LOAD_SCALE

    def pack(self) -> bytes:
        return struct.pack(">H", self.level)

    @classmethod
    def unpack(cls, payload: bytes) -> "LoadReport":
        return cls(_unpack(">H", payload)[0])


@dataclass(frozen=True)
class Data:
    TYPE: ClassVar[MsgType] = MsgType.DATA
    msg_id: int
    origin: NodeId
    hop: Hop
    payload: bytes = b""

    def pack(self) -> bytes:
        return struct.pack(">QIB", self.msg_id, self.origin.id, int(self.hop)) + self.payload

    @classmethod
    def unpack(cls, payload: bytes) -> "Data":
        msg_id, origin, hop = _unpack(">QIB", payload)
        if hop not in (Hop.SOURCE, Hop.PEER):
            raise FrameError(f"invalid hop byte {hop}")
        return cls(msg_id, NodeId.eh(origin), Hop(hop), payload[13:])


@dataclass(frozen=True)
class Bye:
    TYPE: ClassVar[MsgType] = MsgType.BYE

    def pack(self) -> bytes:
        return b""

    @classmethod
    def unpack(cls, payload: bytes) -> "Bye":
        return cls()


@dataclass(frozen=True)
class PeerMeas:
    """Outgoing-direction probe RTT in microseconds; None when there is no outgoing conn."""

    TYPE: ClassVar[MsgType] = MsgType.PEER_MEAS
    latency_us: Optional[int]

    def pack(self) -> bytes:
        return struct.pack(">I", _latency_field(self.latency_us))

    @classmethod
    def unpack(cls, payload: bytes) -> "PeerMeas":
        (value,) = _unpack(">I", payload)
        return cls(None if value == NO_LATENCY else value)


@dataclass(frozen=True)
class LinkReport:
    """OH-pair latency for the monitor's matrix; ``latency_us`` None means the peer is lost."""

    TYPE: ClassVar[MsgType] = MsgType.LINK_REPORT
    peer: NodeId
    latency_us: Optional[int]

    def pack(self) -> bytes:
        return struct.pack(">II", self.peer.id, _latency_field(self.latency_us))

    @classmethod
    def unpack(cls, payload: bytes) -> "LinkReport":
        peer, value = _unpack(">II", payload)
        return cls(NodeId.oh(peer), None if value == NO_LATENCY else value)


@dataclass(frozen=True)
class Directory:
    """Alive OHs and their listen addresses."""

    TYPE: ClassVar[MsgType] = MsgType.DIRECTORY
    entries: Tuple[Tuple[NodeId, str], ...] = field(default_factory=tuple)

    def pack(self) -> bytes:
        parts = [struct.pack(">H", len(self.entries))]
        for oh, addr in self.entries:
            raw = addr.encode("utf-8")
            parts.append(struct.pack(">IH", oh.id, len(raw)) + raw)
        return b"".join(parts)

    @classmethod
    def unpack(cls, payload: bytes) -> "Directory":
        (count,) = _unpack(">H", payload)
        offset, entries = 2, []
        for _ in range(count):
            oh, size = _unpack(">IH", payload, offset)
            offset += 6
            raw = payload[offset:offset + size]
            if len(raw) != size:
                raise FrameError("truncated directory entry")
            offset += size
            entries.append((NodeId.oh(oh), _utf8(raw)))
        if offset != len(payload):
            raise FrameError("trailing bytes in directory")
        return cls(tuple(entries))


Message = Union[Hello, Ping, Pong, MeasReport, Assign, Reject, LoadReport, Data, Bye,
                PeerMeas, LinkReport, Directory]

_REGISTRY: Dict[int, Type] = {cls.TYPE: cls for cls in (
    Hello, Ping, Pong, MeasReport, Assign, Reject, LoadReport, Data, Bye,
    PeerMeas, LinkReport, Directory,
)}


def encode(msg: Message) -> bytes:
    """
    Encode one message as a complete frame.

    Raises:
        FrameError: Payload over the 1 MiB limit or a field out of range
    """
    try:
        payload = msg.pack()
    except struct.error as e:
        raise FrameError(f"cannot encode {type(msg).__name__}: {e}") from None
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return struct.pack(">IB", TYPE_BYTE_SIZE + len(payload), msg.TYPE) + payload


def _decode_at(buf: bytes, start: int) -> Tuple[Message, int]:
    if len(buf) - start < LENGTH_PREFIX_SIZE:
        raise NeedMoreData()
    (length,) = struct.unpack_from(">I", buf, start)
    if length < TYPE_BYTE_SIZE:
        raise FrameError("zero-length frame")
    if length - TYPE_BYTE_SIZE > MAX_PAYLOAD:
        raise FrameError(f"frame length {length} exceeds limit")
    end = start + LENGTH_PREFIX_SIZE + length
    if len(buf) < end:
        raise NeedMoreData()
    msg_type = buf[start + LENGTH_PREFIX_SIZE]
    cls = _REGISTRY.get(msg_type)
    if cls is None:
        raise FrameError(f"unknown message type 0x{msg_type:02X}")
    return cls.unpack(bytes(buf[start + HEADER_SIZE:end])), end


def decode(buf: bytes) -> Tuple[Message, bytes]:
    """
    Decode the first frame of ``buf``.

    Returns:
        The message and the bytes after its frame

    Raises:
        NeedMoreData: ``buf`` holds no complete frame yet
        FrameError: Malformed frame
    """
    msg, end = _decode_at(buf, 0)
    return msg, bytes(buf[end:])


_PING_HEAD = struct.pack(">IB", PING_FRAME_SIZE - LENGTH_PREFIX_SIZE, MsgType.PING)
_PONG_HEAD = struct.pack(">IB", TYPE_BYTE_SIZE + _SEQ.size, MsgType.PONG)
_PONG_FRAME_SIZE = HEADER_SIZE + _SEQ.size


def encode_ping(seq: int) -> bytes:
    """Same bytes as ``encode(Ping(seq))`` without building the message."""
    try:
        return _PING_HEAD + _SEQ.pack(seq) + _PING_TAIL
    except struct.error as e:
        raise FrameError(f"cannot encode Ping: {e}") from None


def encode_pong(seq: int) -> bytes:
    try:
        return _PONG_HEAD + _SEQ.pack(seq)
    except struct.error as e:
        raise FrameError(f"cannot encode Pong: {e}") from None


def decode_frame(frame: bytes) -> Message:
    """Decode a buffer that must hold exactly one frame."""
    size = len(frame)
    if size == PING_FRAME_SIZE and frame[:HEADER_SIZE] == _PING_HEAD:
        return Ping(_SEQ.unpack_from(frame, HEADER_SIZE)[0])
    if size == _PONG_FRAME_SIZE and frame[:HEADER_SIZE] == _PONG_HEAD:
        return Pong(_SEQ.unpack_from(frame, HEADER_SIZE)[0])
    try:
        msg, rest = decode(frame)
    except NeedMoreData:
        raise FrameError("truncated frame") from None
    if rest:
        raise FrameError(f"{len(rest)} bytes after frame")
    return msg


class StreamDecoder:
    """Incremental decoder for one byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Message]:
        """Append bytes and return every message completed by them."""
        self._buf.extend(data)
        out: List[Message] = []
        offset = 0
        try:
            while True:
                msg, offset = _decode_at(self._buf, offset)
                out.append(msg)
        except NeedMoreData:
            return out
        finally:
            del self._buf[:offset]

    @property
    def pending(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        """
        Raises:
            FrameError: The stream ended inside a frame
        """
        if self._buf:
            raise FrameError(f"stream closed with {len(self._buf)} bytes of a partial frame")
