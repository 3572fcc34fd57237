import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shv import wire
from shv.errors import BadLength, NeedMoreBytes, PayloadTooLarge, ProtocolViolation, TopicTooLong
from shv.wire import ConnAck, Connect, Disconnect, PingReq, PingResp, Publish

# Hand-encoded from the MQTT 3.1.1 framing rules: fixed header byte,
# remaining length, then the variable header and payload.
GOLDEN = [
    (Publish("/a/b", bytes.fromhex("0000000000000001" "0000000000000002")),
     "30 16 00 04 2F 61 2F 62 00 00 00 00 00 00 00 01 00 00 00 00 00 00 00 02"),
    (PingReq(), "C0 00"),
    (PingResp(), "D0 00"),
    (Disconnect(), "E0 00"),
    (ConnAck(0), "20 02 00 00"),
    (ConnAck(5), "20 02 00 05"),
    # protocol name "MQTT", level 4, clean session, keep-alive 60, client id "p1"
    (Connect("p1", 60), "10 0E 00 04 4D 51 54 54 04 02 00 3C 00 02 70 31"),
    (Connect("", 0), "10 0C 00 04 4D 51 54 54 04 02 00 00 00 00"),
    (Publish("/x", b""), "30 04 00 02 2F 78"),
]


@pytest.mark.parametrize("packet,hexbytes", GOLDEN)
def test_golden_vectors(packet, hexbytes):
    raw = bytes.fromhex(hexbytes)
    assert wire.encode_packet(packet) == raw
    assert wire.decode_packet(raw) == (packet, len(raw))


@pytest.mark.parametrize("n,encoded", [
    (0, "00"), (127, "7F"), (128, "80 01"), (16383, "FF 7F"), (16384, "80 80 01"),
    (2097151, "FF FF 7F"), (2097152, "80 80 80 01"),
])
def test_remaining_length_encoding(n, encoded):
    assert wire._encode_length(n) == bytes.fromhex(encoded)


def test_multibyte_length_publish():
    payload = wire.encode_payload([(i + 1, i) for i in range(8)])
    raw = wire.encode_packet(Publish("/a", payload))
    # 2 + 2 + 128 = 132 bytes of body
    assert raw[:3] == bytes.fromhex("30 84 01")
    assert wire.decode_packet(raw)[0].payload == payload


def test_payload_layout():
    assert wire.encode_payload([(1, 2)]) == bytes.fromhex("0000000000000001" "0000000000000002")
    assert wire.encode_payload([(1, -1)])[8:] == b"\xff" * 8
    assert wire.decode_payload(wire.encode_payload([(2 ** 64 - 1, -(2 ** 63))])) == [(2 ** 64 - 1, -(2 ** 63))]


def test_payload_round_trip_1000():
    rng = random.Random(7)
    ts = sorted(rng.randrange(1, 2 ** 64) for _ in range(1000))
    records = [(t, rng.randrange(-(2 ** 63), 2 ** 63)) for t in ts]
    assert wire.decode_payload(wire.encode_payload(records)) == records


def test_payload_errors():
    with pytest.raises(BadLength):
        wire.decode_payload(b"\x00" * 17)
    with pytest.raises(ValueError):
        wire.encode_payload([])
    with pytest.raises(ValueError):
        wire.encode_payload([(2, 0), (1, 0)])


def test_partial_frames():
    raw = bytes.fromhex(GOLDEN[0][1])
    with pytest.raises(NeedMoreBytes):
        wire.decode_packet(raw[:3])
    with pytest.raises(NeedMoreBytes):
        wire.decode_packet(b"")
    with pytest.raises(NeedMoreBytes):
        wire.decode_packet(b"\x30\x80")


@pytest.mark.parametrize("raw", [
    "82 05 00 01 00 00 00",  # SUBSCRIBE
    "82",  # SUBSCRIBE header alone is enough to reject
    "32 06 00 02 2F 78 00 01",  # PUBLISH QoS 1
    "31 04 00 02 2F 78",  # RETAIN
    "38 04 00 02 2F 78",  # DUP
    "A2 02 00 01",  # UNSUBSCRIBE
    "30 FF FF FF FF 01",  # five length bytes
    "30 80 00",  # non-minimal length
    "10 0C 00 04 4D 51 54 54 05 02 00 00 00 00",  # protocol level 5
    "10 0C 00 04 4D 51 54 54 04 06 00 00 00 00",  # will flag
    "C0 01 00",  # PINGREQ with a body
])
def test_protocol_violations(raw):
    with pytest.raises(ProtocolViolation):
        wire.decode_packet(bytes.fromhex(raw))


def test_encode_limits():
    with pytest.raises(TopicTooLong):
        wire.encode_packet(Publish("/" + "a" * 255, b""))
    with pytest.raises(PayloadTooLarge):
        wire.encode_packet(Publish("/a", b"\x00" * (wire.MAX_PAYLOAD + 16)))
    raw = wire.encode_packet(Publish("/a", b"\x00" * wire.MAX_PAYLOAD))
    assert len(wire.decode_packet(raw)[0].payload) == wire.MAX_PAYLOAD


component = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_.-", min_size=1, max_size=10)
topic_text = st.lists(component, min_size=1, max_size=8).map(lambda c: "/" + "/".join(c)).filter(
    lambda t: len(t) <= 255)


@st.composite
def payloads(draw):
    ts = sorted(draw(st.lists(st.integers(1, 2 ** 64 - 1), min_size=1, max_size=40)))
    vals = draw(st.lists(st.integers(-(2 ** 63), 2 ** 63 - 1), min_size=len(ts), max_size=len(ts)))
    return wire.encode_payload(list(zip(ts, vals)))


packets = st.one_of(
    st.builds(Connect, st.text(max_size=23), st.integers(0, 0xFFFF)),
    st.builds(ConnAck, st.integers(0, 5)),
    st.builds(Publish, topic_text, payloads()),
    st.just(PingReq()), st.just(PingResp()), st.just(Disconnect()),
)


@settings(max_examples=300)
@given(packets)
def test_round_trip(p):
    raw = wire.encode_packet(p)
    assert wire.decode_packet(raw) == (p, len(raw))
    # trailing bytes belong to the next packet
    assert wire.decode_packet(raw + b"\xc0\x00") == (p, len(raw))


@settings(max_examples=100)
@given(packets)
def test_byte_at_a_time(p):
    raw = wire.encode_packet(p)
    for i in range(len(raw)):
        with pytest.raises(NeedMoreBytes):
            wire.decode_packet(raw[:i])
    dec = wire.StreamDecoder()
    for i in range(len(raw) - 1):
        assert dec.feed(raw[i:i + 1]) == []
    assert dec.feed(raw[-1:]) == [p]
    assert dec.pending == 0


@settings(max_examples=50)
@given(st.lists(packets, min_size=1, max_size=10), st.integers(1, 50))
def test_stream_chunking(ps, chunk):
    raw = b"".join(wire.encode_packet(p) for p in ps)
    dec = wire.StreamDecoder()
    out = []
    for i in range(0, len(raw), chunk):
        out += dec.feed(raw[i:i + chunk])
    assert out == ps


def test_record_struct():
    assert struct.calcsize(">Qq") == wire.RECORD_SIZE
