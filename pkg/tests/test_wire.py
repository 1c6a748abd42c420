import numpy as np
import pytest
from hypothesis import given, strategies as st

from cowqkd.wire import (AUTHENTICATED, HEADER, MAGIC, TAG_BYTES, ClassicalMessage, FrameReader, MessageType,
                         WireError, decode_deltas, decode_frame, decode_varint, encode_deltas, encode_frame,
                         encode_varint, pack_bits, unpack_bits)

TAG = bytes(range(TAG_BYTES))


def message(mtype, payload=b""):
    return ClassicalMessage(mtype, payload, TAG if mtype in AUTHENTICATED else None)


@pytest.mark.parametrize("value, encoded", [(0, b"\x00"), (1, b"\x01"), (127, b"\x7f"), (128, b"\x80\x01"),
                                            (300, b"\xac\x02")])
def test_varint_examples(value, encoded):
    assert encode_varint(value) == encoded
    assert decode_varint(encoded) == (value, len(encoded))


@given(st.integers(0, 2**64 - 1))
def test_varint_round_trip(v):
    assert decode_varint(encode_varint(v)) == (v, len(encode_varint(v)))


def test_varint_errors():
    with pytest.raises(WireError):
        encode_varint(-1)
    with pytest.raises(WireError):
        decode_varint(b"\x80\x80")


@given(st.lists(st.integers(0, 2**40), unique=True), st.integers(0, 1000))
def test_deltas_round_trip(values, base):
    values = sorted(v + base for v in values)
    data = encode_deltas(values, base=base)
    out, pos = decode_deltas(data, base=base, count=len(values))
    assert list(out) == values and pos == len(data)


def test_deltas_must_increase():
    with pytest.raises(WireError):
        encode_deltas([5, 3])
    with pytest.raises(WireError):
        encode_deltas([5, 5])
    with pytest.raises(WireError):
        decode_deltas(encode_deltas([1, 2]), count=3)


@given(st.lists(st.integers(0, 1), max_size=300))
def test_bits_round_trip(bits):
    data = pack_bits(bits)
    out, pos = unpack_bits(data)
    assert list(out) == bits and pos == len(data)


@given(st.sampled_from(list(MessageType)), st.binary(max_size=500))
def test_frame_round_trip(mtype, payload):
    msg = message(mtype, payload)
    frame = encode_frame(msg)
    assert frame[0] == MAGIC
    assert decode_frame(frame) == msg


def test_frame_layout():
    frame = encode_frame(message(MessageType.DECOY_REMOVE, b"abc"))
    assert frame == HEADER.pack(MAGIC, MessageType.DECOY_REMOVE, 3) + b"abc"
    tagged = encode_frame(message(MessageType.EC_PARITY, b"xy"))
    assert tagged.endswith(TAG) and len(tagged) == HEADER.size + 2 + TAG_BYTES


def test_distillation_messages_require_tags():
    for mtype in (MessageType.EC_PARITY, MessageType.EC_SHUFFLE, MessageType.PA_SEED, MessageType.VIS_REPORT):
        with pytest.raises(WireError):
            encode_frame(ClassicalMessage(mtype, b"x"))
    with pytest.raises(WireError):
        encode_frame(ClassicalMessage(MessageType.SYNC_PATTERN, b"x", TAG))


@pytest.mark.parametrize("frame", [b"\x00\x01\x00\x00\x00\x00", bytes([MAGIC, 99, 0, 0, 0, 0]), b"\xc0\x01",
                                   bytes([MAGIC, 1, 5, 0, 0, 0]) + b"ab"])
def test_malformed_frames(frame):
    with pytest.raises(WireError):
        decode_frame(frame)


@given(st.lists(st.tuples(st.sampled_from(list(MessageType)), st.binary(max_size=64)), max_size=20),
       st.lists(st.integers(1, 40), min_size=1, max_size=10))
def test_reader_reassembles_any_chunking(msgs, cuts):
    msgs = [message(t, p) for t, p in msgs]
    stream = b"".join(encode_frame(m) for m in msgs)
    reader, got, pos, i = FrameReader(), [], 0, 0
    while pos < len(stream):
        step = cuts[i % len(cuts)]
        got.extend(reader.feed(stream[pos:pos + step]))
        pos += step
        i += 1
    assert got == msgs
    assert reader.pending == 0


def test_reader_rejects_garbage():
    with pytest.raises(WireError):
        list(FrameReader().feed(b"\x13\x01\x00\x00\x00\x00"))


def test_bit_packing_is_msb_first():
    assert pack_bits(np.array([1, 0, 0, 0, 0, 0, 0, 1, 1])) == b"\x09\x81\x80"
