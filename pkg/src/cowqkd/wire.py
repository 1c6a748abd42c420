"""Classical-channel framing.

Frame layout: magic ``0xC0``, message type byte, payload length as a
little-endian uint32, payload, then an 8-byte authentication tag for the
message types that require one.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Iterator

import numpy as np

MAGIC = 0xC0
HEADER = struct.Struct("<BBI")
TAG_BYTES = 8
MAX_PAYLOAD = 1 << 28


class WireError(ValueError):
    pass


class MessageType(IntEnum):
    SYNC_PATTERN = 1
    DETECT_ANNOUNCE = 2
    DM_ANNOUNCE = 3
    DECOY_REMOVE = 4
    VIS_REPORT = 5
    EC_PARITY = 6
    EC_SHUFFLE = 7
    PA_SEED = 8
    AUTH_TAG = 9
    RESTART = 10
    # wavelength-scan step: Alice's emitter setting out, Bob's counts back
    SCAN_STEP = 11
    # parameter-estimation sample for the first block
    EC_SAMPLE = 12


AUTHENTICATED = frozenset({
    MessageType.VIS_REPORT,
    MessageType.EC_PARITY,
    MessageType.EC_SHUFFLE,
    MessageType.EC_SAMPLE,
    MessageType.PA_SEED,
    MessageType.AUTH_TAG,
})


class RestartReason(IntEnum):
    DESYNC = 1
    AUTH_FAILURE = 2
    POOL_EXHAUSTED = 3
    SCAN_FAILED = 4
    SHUTDOWN = 5


@dataclass(frozen=True)
class ClassicalMessage:
    msg_type: MessageType
    payload: bytes = b""
    tag: bytes | None = None

    @property
    def needs_tag(self) -> bool:
        return self.msg_type in AUTHENTICATED

    def signed_bytes(self) -> bytes:
        """The bytes covered by the authentication tag."""
        return bytes([self.msg_type]) + self.payload


# --- varints ----------------------------------------------------------------


def encode_varint(value: int) -> bytes:
    if value < 0:
        raise WireError(f"varint must be non-negative, got {value}")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(data: bytes, pos: int = 0) -> tuple[int, int]:
    """Returns (value, position after the varint)."""
    result = shift = 0
    while True:
        if pos >= len(data):
            raise WireError("truncated varint")
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 63 + 7:
            raise WireError("varint too long")


def encode_deltas(values: Iterable[int], base: int = 0, strict: bool = True) -> bytes:
    """Varint-encoded gaps of an increasing sequence; the first gap is from ``base``.

    ``strict`` demands strictly increasing values.
    """
    out = bytearray()
    prev = base
    first = True
    for v in values:
        v = int(v)
        gap = v - prev
        if gap < 0 or (strict and gap == 0 and not first):
            raise WireError("announced indices must be strictly increasing")
        out += encode_varint(gap)
        prev = v
        first = False
    return bytes(out)


def decode_deltas(data: bytes, pos: int = 0, count: int | None = None,
                  base: int = 0) -> tuple[np.ndarray, int]:
    vals = []
    total = base
    while pos < len(data) and (count is None or len(vals) < count):
        gap, pos = decode_varint(data, pos)
        total += gap
        vals.append(total)
    if count is not None and len(vals) != count:
        raise WireError("truncated index list")
    return np.array(vals, dtype=np.int64), pos


def pack_bits(bits) -> bytes:
    """Bit count as varint, then the bits packed MSB first."""
    arr = np.asarray(bits, dtype=np.uint8)
    return encode_varint(arr.size) + np.packbits(arr).tobytes()


def unpack_bits(data: bytes, pos: int = 0) -> tuple[np.ndarray, int]:
    n, pos = decode_varint(data, pos)
    nbytes = (n + 7) // 8
    if pos + nbytes > len(data):
        raise WireError("truncated bitset")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=pos))[:n]
    return bits, pos + nbytes


# --- frames -----------------------------------------------------------------


def encode_frame(msg: ClassicalMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise WireError("payload too large")
    if msg.needs_tag and (msg.tag is None or len(msg.tag) != TAG_BYTES):
        raise WireError(f"{msg.msg_type.name} requires an {TAG_BYTES}-byte tag")
    if not msg.needs_tag and msg.tag is not None:
        raise WireError(f"{msg.msg_type.name} does not carry a tag")
    body = HEADER.pack(MAGIC, msg.msg_type, len(msg.payload)) + msg.payload
    return body + (msg.tag or b"")


def frame_length(header: bytes) -> int:
    """Total frame length given at least the header bytes."""
    magic, mtype, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise WireError(f"bad magic byte 0x{magic:02X}")
    try:
        kind = MessageType(mtype)
    except ValueError:
        raise WireError(f"unknown message type {mtype}") from None
    if length > MAX_PAYLOAD:
        raise WireError("payload too large")
    return HEADER.size + length + (TAG_BYTES if kind in AUTHENTICATED else 0)


def decode_frame(data: bytes) -> ClassicalMessage:
    if len(data) < HEADER.size:
        raise WireError("truncated header")
    total = frame_length(data)
    if len(data) != total:
        raise WireError(f"frame length {len(data)} != {total}")
    _, mtype, length = HEADER.unpack_from(data)
    kind = MessageType(mtype)
    payload = bytes(data[HEADER.size: HEADER.size + length])
    tag = bytes(data[HEADER.size + length:]) if kind in AUTHENTICATED else None
    return ClassicalMessage(kind, payload, tag)


class FrameReader:
    """Reassembles frames from an arbitrary chunking of a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> Iterator[ClassicalMessage]:
        self._buf += chunk
        while len(self._buf) >= HEADER.size:
            total = frame_length(self._buf)
            if len(self._buf) < total:
                break
            frame = bytes(self._buf[:total])
            del self._buf[:total]
            yield decode_frame(frame)

    @property
    def pending(self) -> int:
        return len(self._buf)
