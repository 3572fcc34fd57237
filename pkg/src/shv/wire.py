"""Publish-only MQTT 3.1.1 subset and the reading payload format.

Only the packets a pusher and collect agent need are understood:
CONNECT, CONNACK, PUBLISH (QoS 0, no DUP, no RETAIN), PINGREQ,
PINGRESP and DISCONNECT.  Anything else is a protocol violation and
ends the session.

A PUBLISH payload is a run of 16-byte records: u64 big-endian
timestamp (ns) followed by i64 big-endian value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import BadLength, NeedMoreBytes, PayloadTooLarge, ProtocolViolation, TopicTooLong

MAX_PAYLOAD = 256 * 1024
MAX_TOPIC = 255
DEFAULT_PORT = 1883
DEFAULT_KEEP_ALIVE = 60
RECORD_SIZE = 16

_RECORD = struct.Struct(">Qq")
_PROTOCOL_NAME = b"\x00\x04MQTT"
_PROTOCOL_LEVEL = 4
_CLEAN_SESSION = 0x02

CONNECT, CONNACK, PUBLISH, PINGREQ, PINGRESP, DISCONNECT = 1, 2, 3, 12, 13, 14


@dataclass(frozen=True)
class Connect:
    client_id: str
    keep_alive_s: int = DEFAULT_KEEP_ALIVE


@dataclass(frozen=True)
class ConnAck:
    code: int = 0


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""


@dataclass(frozen=True)
class PingReq:
    pass


@dataclass(frozen=True)
class PingResp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


def _encode_length(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _encode_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string longer than 65535 bytes")
    return struct.pack(">H", len(raw)) + raw


def _frame(first: int, body: bytes) -> bytes:
    return bytes((first,)) + _encode_length(len(body)) + body


def encode_packet(p) -> bytes:
    if isinstance(p, Publish):
        topic = p.topic.encode("utf-8")
        if len(topic) > MAX_TOPIC:
            raise TopicTooLong(f"topic is {len(topic)} bytes, limit {MAX_TOPIC}")
        if len(p.payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload is {len(p.payload)} bytes, limit {MAX_PAYLOAD}")
        return _frame(0x30, struct.pack(">H", len(topic)) + topic + bytes(p.payload))
    if isinstance(p, Connect):
        if not 0 <= p.keep_alive_s <= 0xFFFF:
            raise ValueError("keep_alive_s out of u16 range")
        body = _PROTOCOL_NAME + bytes((_PROTOCOL_LEVEL, _CLEAN_SESSION)) + struct.pack(">H", p.keep_alive_s)
        return _frame(0x10, body + _encode_str(p.client_id))
    if isinstance(p, ConnAck):
        return bytes((0x20, 0x02, 0x00, p.code))
    if isinstance(p, PingReq):
        return b"\xc0\x00"
    if isinstance(p, PingResp):
        return b"\xd0\x00"
    if isinstance(p, Disconnect):
        return b"\xe0\x00"
    raise TypeError(f"not a packet: {p!r}")


def _decode_str(body, pos):
    if pos + 2 > len(body):
        raise ProtocolViolation("truncated string length")
    (n,) = struct.unpack_from(">H", body, pos)
    pos += 2
    if pos + n > len(body):
        raise ProtocolViolation("string overruns packet")
    try:
        return bytes(body[pos:pos + n]).decode("utf-8"), pos + n
    except UnicodeDecodeError:
        raise ProtocolViolation("string is not valid UTF-8") from None


def _decode_body(first, body):
    ptype, flags = first >> 4, first & 0x0F
    if ptype == PUBLISH:
        if flags != 0:
            raise ProtocolViolation(f"PUBLISH flags 0x{flags:x} unsupported (QoS 0 only, no DUP/RETAIN)")
        topic, pos = _decode_str(body, 0)
        payload = bytes(body[pos:])
        if len(payload) > MAX_PAYLOAD:
            raise ProtocolViolation("payload too large")
        return Publish(topic, payload)
    if flags != 0:
        raise ProtocolViolation(f"reserved flags set on packet type {ptype}")
    if ptype == CONNECT:
        if bytes(body[:6]) != _PROTOCOL_NAME:
            raise ProtocolViolation("not an MQTT CONNECT")
        if len(body) < 10:
            raise ProtocolViolation("truncated CONNECT")
        if body[6] != _PROTOCOL_LEVEL:
            raise ProtocolViolation(f"unsupported protocol level {body[6]}")
        if body[7] & ~_CLEAN_SESSION & 0xFF:
            raise ProtocolViolation("CONNECT flags beyond clean-session are unsupported")
        (keep_alive,) = struct.unpack_from(">H", body, 8)
        client_id, pos = _decode_str(body, 10)
        if pos != len(body):
            raise ProtocolViolation("trailing bytes in CONNECT")
        return Connect(client_id, keep_alive)
    if ptype == CONNACK:
        if len(body) != 2:
            raise ProtocolViolation("CONNACK must carry 2 bytes")
        return ConnAck(body[1])
    simple = {PINGREQ: PingReq, PINGRESP: PingResp, DISCONNECT: Disconnect}
    if ptype in simple:
        if body:
            raise ProtocolViolation("unexpected body")
        return simple[ptype]()
    raise ProtocolViolation(f"unsupported packet type {ptype}")


def decode_packet(buf):
    """Decode one packet from the front of ``buf``.

    Returns ``(packet, consumed)``.  Raises :class:`NeedMoreBytes` if the
    frame is incomplete and :class:`ProtocolViolation` if it is invalid.
    """
    n = len(buf)
    if n == 0:
        raise NeedMoreBytes()
    first = buf[0]
    # reject unsupported types before waiting for the rest of the frame
    if first >> 4 not in (CONNECT, CONNACK, PUBLISH, PINGREQ, PINGRESP, DISCONNECT):
        raise ProtocolViolation(f"unsupported packet type {first >> 4}")
    if first >> 4 == PUBLISH and first & 0x0F:
        raise ProtocolViolation("PUBLISH with QoS>0, DUP or RETAIN")
    length = 0
    mult = 1
    pos = 1
    while True:
        if pos >= n:
            raise NeedMoreBytes()
        byte = buf[pos]
        pos += 1
        length += (byte & 0x7F) * mult
        if not byte & 0x80:
            break
        if pos - 1 >= 4:
            raise ProtocolViolation("malformed remaining length")
        mult *= 128
    if pos - 1 > 1 and buf[pos - 1] == 0:
        raise ProtocolViolation("non-minimal remaining length")
    if length > MAX_PAYLOAD + MAX_TOPIC + 2 + 64:
        raise ProtocolViolation("packet too large")
    end = pos + length
    if end > n:
        raise NeedMoreBytes()
    return _decode_body(first, memoryview(buf)[pos:end]), end


class StreamDecoder:
    """Incremental decoder over a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data) -> list:
        self._buf += data
        packets = []
        while self._buf:
            try:
                packet, used = decode_packet(self._buf)
            except NeedMoreBytes:
                break
            packets.append(packet)
            del self._buf[:used]
        return packets

    @property
    def pending(self) -> int:
        return len(self._buf)


def encode_payload(readings) -> bytes:
    readings = list(readings)
    if not readings:
        raise ValueError("payload needs at least one reading")
    prev = None
    out = bytearray()
    for ts, value in readings:
        if prev is not None and ts < prev:
            raise ValueError("timestamps must be nondecreasing")
        prev = ts
        out += _RECORD.pack(ts, value)
    return bytes(out)


def decode_payload(data) -> list:
    if len(data) % RECORD_SIZE:
        raise BadLength(f"payload of {len(data)} bytes is not a multiple of {RECORD_SIZE}")
    return list(_RECORD.iter_unpack(data))
