"""Binary wire transport: length-prefixed frames, channels, cost accounting.

Frame layout: a 4-byte big-endian length prefix (counting the type byte plus
the body), one type byte, then a type-specific body.  All integers are
big-endian fixed width; byte strings and text carry a 2-byte length prefix.
Encoding is canonical: each frame object has exactly one wire form, and
decoding rejects trailing or missing bytes.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from io import BytesIO
from typing import BinaryIO

from .protocol import (
    Ack,
    ErrorFrame,
    HashRequest,
    HashRequestEntry,
    HashResponse,
    HashResponseEntry,
    LocationUpdate,
    PayloadMode,
    SeekEntry,
    SeekRequest,
    SeekResponse,
)

FRAME_LOCATION_UPDATE = 0x01
FRAME_PROX_REQUEST_SEEK = 0x02
FRAME_PROX_REQUEST_HASH = 0x03
FRAME_PROX_RESPONSE_SEEK = 0x04
FRAME_PROX_RESPONSE_HASH = 0x05
FRAME_ACK = 0x06
FRAME_ERROR = 0x07

FAMILY_NAMES = {
    FRAME_LOCATION_UPDATE: "location-update",
    FRAME_PROX_REQUEST_SEEK: "prox-request-seek",
    FRAME_PROX_REQUEST_HASH: "prox-request-hash",
    FRAME_PROX_RESPONSE_SEEK: "prox-response-seek",
    FRAME_PROX_RESPONSE_HASH: "prox-response-hash",
    FRAME_ACK: "ack",
    FRAME_ERROR: "error",
}

# fixed width of a commutative-group element on the wire (fits a 2048-bit prime)
ELEMENT_WIDTH = 256

_HEADER = struct.Struct("!IB")
_U8 = struct.Struct("!B")
_U16 = struct.Struct("!H")
_U32 = struct.Struct("!I")
_U64 = struct.Struct("!Q")


class FrameError(ValueError):
    """Frame violates the wire schema."""


Frame = LocationUpdate | SeekRequest | HashRequest | SeekResponse | HashResponse | Ack | ErrorFrame


def _pack_str(out: BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FrameError("string field too long")
    out.write(_U16.pack(len(raw)))
    out.write(raw)


def _pack_bytes(out: BytesIO, raw: bytes) -> None:
    if len(raw) > 0xFFFF:
        raise FrameError("byte field too long")
    out.write(_U16.pack(len(raw)))
    out.write(raw)


def _pack_element(out: BytesIO, value: int) -> None:
    try:
        out.write(int(value).to_bytes(ELEMENT_WIDTH, "big"))
    except OverflowError as exc:
        raise FrameError("group element does not fit the wire width") from exc


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise FrameError("frame body truncated")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return _U8.unpack(self.take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def string(self) -> str:
        try:
            return self.take(self.u16()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FrameError("invalid utf-8 in string field") from exc

    def blob(self) -> bytes:
        return self.take(self.u16())

    def element(self) -> int:
        return int.from_bytes(self.take(ELEMENT_WIDTH), "big")

    def done(self) -> None:
        if self._pos != len(self._data):
            raise FrameError("trailing bytes after frame body")


def _mode(value: int) -> PayloadMode:
    try:
        return PayloadMode(value)
    except ValueError as exc:
        raise FrameError(f"unknown payload mode {value}") from exc


def encode_frame(frame: Frame) -> bytes:
    out = BytesIO()
    if isinstance(frame, LocationUpdate):
        ftype = FRAME_LOCATION_UPDATE
        _pack_str(out, frame.user_id)
        out.write(_U64.pack(frame.interval))
        out.write(_U8.pack(frame.mode))
        _pack_bytes(out, frame.payload)
    elif isinstance(frame, SeekRequest):
        ftype = FRAME_PROX_REQUEST_SEEK
        _pack_str(out, frame.requester)
    elif isinstance(frame, HashRequest):
        ftype = FRAME_PROX_REQUEST_HASH
        _pack_str(out, frame.requester)
        out.write(_U32.pack(len(frame.entries)))
        for entry in frame.entries:
            _pack_str(out, entry.buddy_id)
            out.write(_U64.pack(entry.interval))
            out.write(_U32.pack(len(entry.candidates)))
            for value in entry.candidates:
                _pack_element(out, value)
    elif isinstance(frame, SeekResponse):
        ftype = FRAME_PROX_RESPONSE_SEEK
        out.write(_U32.pack(len(frame.entries)))
        for entry in frame.entries:
            _pack_str(out, entry.buddy_id)
            out.write(_U64.pack(entry.interval))
            out.write(_U8.pack(entry.mode))
            _pack_bytes(out, entry.payload)
        out.write(_U32.pack(len(frame.unknown)))
        for user in frame.unknown:
            _pack_str(out, user)
    elif isinstance(frame, HashResponse):
        ftype = FRAME_PROX_RESPONSE_HASH
        out.write(_U32.pack(len(frame.entries)))
        for entry in frame.entries:
            _pack_str(out, entry.buddy_id)
            out.write(_U8.pack(1 if entry.known else 0))
            if entry.known:
                if entry.reported is None:
                    raise FrameError("known response entry missing reported element")
                out.write(_U32.pack(len(entry.candidates)))
                for value in entry.candidates:
                    _pack_element(out, value)
                _pack_element(out, entry.reported)
    elif isinstance(frame, Ack):
        ftype = FRAME_ACK
        out.write(_U8.pack(frame.status))
    elif isinstance(frame, ErrorFrame):
        ftype = FRAME_ERROR
        out.write(_U8.pack(frame.code))
        _pack_str(out, frame.message)
    else:
        raise FrameError(f"not a wire frame: {type(frame).__name__}")
    body = out.getvalue()
    return _HEADER.pack(len(body) + 1, ftype) + body


def decode_frame(data: bytes) -> Frame:
    if len(data) < _HEADER.size:
        raise FrameError("frame shorter than header")
    length, ftype = _HEADER.unpack_from(data)
    if len(data) != 4 + length:
        raise FrameError("length prefix does not match frame size")
    r = _Reader(data[_HEADER.size :])
    if ftype == FRAME_LOCATION_UPDATE:
        frame: Frame = LocationUpdate(r.string(), r.u64(), _mode(r.u8()), r.blob())
    elif ftype == FRAME_PROX_REQUEST_SEEK:
        frame = SeekRequest(r.string())
    elif ftype == FRAME_PROX_REQUEST_HASH:
        requester = r.string()
        entries = []
        for _ in range(r.u32()):
            buddy = r.string()
            interval = r.u64()
            count = r.u32()
            entries.append(
                HashRequestEntry(buddy, interval, tuple(r.element() for _ in range(count)))
            )
        frame = HashRequest(requester, tuple(entries))
    elif ftype == FRAME_PROX_RESPONSE_SEEK:
        entries = [
            SeekEntry(r.string(), r.u64(), _mode(r.u8()), r.blob()) for _ in range(r.u32())
        ]
        unknown = tuple(r.string() for _ in range(r.u32()))
        frame = SeekResponse(tuple(entries), unknown)
    elif ftype == FRAME_PROX_RESPONSE_HASH:
        entries = []
        for _ in range(r.u32()):
            buddy = r.string()
            if r.u8():
                count = r.u32()
                sealed = tuple(r.element() for _ in range(count))
                entries.append(HashResponseEntry(buddy, True, sealed, r.element()))
            else:
                entries.append(HashResponseEntry(buddy, False))
        frame = HashResponse(tuple(entries))
    elif ftype == FRAME_ACK:
        frame = Ack(r.u8())
    elif ftype == FRAME_ERROR:
        frame = ErrorFrame(r.u8(), r.string())
    else:
        raise FrameError(f"unknown frame type 0x{ftype:02x}")
    r.done()
    return frame


def frame_type(frame: Frame) -> int:
    data = encode_frame(frame)
    return data[4]


def write_frame(stream: BinaryIO, frame: Frame) -> int:
    data = encode_frame(frame)
    stream.write(data)
    return len(data)


def read_frame(stream: BinaryIO) -> Frame | None:
    """Read one frame from a blocking stream; None on clean EOF."""
    header = _read_exact(stream, _HEADER.size)
    if header is None:
        return None
    length, _ = _HEADER.unpack(header)
    rest = _read_exact(stream, length - 1)
    if rest is None:
        raise FrameError("stream ended mid-frame")
    return decode_frame(header + rest)


def _read_exact(stream: BinaryIO, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if not buf:
                return None
            raise FrameError("stream ended mid-frame")
        buf += chunk
    return buf


@dataclass
class Traffic:
    frames: int = 0
    total_bytes: int = 0

    def add(self, nbytes: int) -> None:
        self.frames += 1
        self.total_bytes += nbytes

    def merged(self, other: "Traffic") -> "Traffic":
        return Traffic(self.frames + other.frames, self.total_bytes + other.total_bytes)


class CostLedger:
    """Counts frames and wire bytes per sender and per message family."""

    def __init__(self) -> None:
        self._records: dict[tuple[str, str], Traffic] = {}

    def record(self, sender: str, family: str, nbytes: int) -> None:
        key = (sender, family)
        if key not in self._records:
            self._records[key] = Traffic()
        self._records[key].add(nbytes)

    def family_totals(self, family: str) -> Traffic:
        out = Traffic()
        for (_, fam), traffic in self._records.items():
            if fam == family:
                out = out.merged(traffic)
        return out

    def user_totals(self, sender: str) -> Traffic:
        out = Traffic()
        for (who, _), traffic in self._records.items():
            if who == sender:
                out = out.merged(traffic)
        return out

    def families(self) -> list[str]:
        return sorted({fam for _, fam in self._records})

    def by_family(self) -> dict[str, Traffic]:
        return {fam: self.family_totals(fam) for fam in self.families()}


@dataclass
class _Delivery:
    ready: float
    data: bytes


class ChannelEnd:
    """One side of a simulated FIFO channel with fixed latency."""

    def __init__(self, name: str, ledger: CostLedger | None, latency: float):
        self.name = name
        self._ledger = ledger
        self._latency = latency
        self._peer: "ChannelEnd | None" = None
        self._inbox: deque[_Delivery] = deque()

    def send(self, frame: Frame, now: float = 0.0) -> int:
        assert self._peer is not None
        data = encode_frame(frame)
        if self._ledger is not None:
            self._ledger.record(self.name, FAMILY_NAMES[data[4]], len(data))
        self._peer._inbox.append(_Delivery(now + self._latency, data))
        return len(data)

    def recv(self, now: float | None = None) -> Frame | None:
        if not self._inbox:
            return None
        if now is not None and self._inbox[0].ready > now:
            return None
        return decode_frame(self._inbox.popleft().data)

    def pending(self) -> int:
        return len(self._inbox)


def simulated_channel(
    name_a: str = "client",
    name_b: str = "server",
    *,
    ledger: CostLedger | None = None,
    latency: float = 0.0,
) -> tuple[ChannelEnd, ChannelEnd]:
    a = ChannelEnd(name_a, ledger, latency)
    b = ChannelEnd(name_b, ledger, latency)
    a._peer = b
    b._peer = a
    return a, b
