"""Go-Back-N ARQ sender/receiver state machines, plus a simulation harness.

Segment layout (big-endian):

    kind (1B) | seq (4B) | payload-length (2B) | checksum (2B) | payload

kind 0x10 is DATA, 0x11 is ACK.  An ACK carries the next-expected sequence
number (cumulative) and an empty payload.  The checksum is the byte-sum mod
65536 of every segment byte except the checksum field itself; covering the
header means a single corrupted seq byte is discarded rather than acking or
delivering data at the wrong position.

The state machines do no I/O and never read a clock: ticks arrive as
arguments, which keeps every test exact.  ``run_transfer`` wires a sender and
receiver through two LossyChannel instances on a shared tick loop.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from collections import deque
from enum import IntEnum
from typing import Sequence

from .channel import ChannelConfig, LossyChannel
from .wire import LengthMismatch, UnknownKind

_SEG_HEADER = struct.Struct(">BIHH")
SEGMENT_HEADER_SIZE = _SEG_HEADER.size  # 9 bytes
MAX_SEGMENT_PAYLOAD = 0xFFFF
_SEQ_LIMIT = 2**32

# Ack-path channel seed is offset from the data path so the two streams
# draw independent sequences from one user-facing seed.
_ACK_SEED_SALT = 0x9E3779B97F4A7C15


class SegKind(IntEnum):
    DATA = 0x10
    ACK = 0x11


class WindowFull(Exception):
    """Send window is closed; retry after acks arrive (backpressure, not failure)."""


def segment_sum(kind: int, seq: int, payload: bytes) -> int:
    """Byte-sum mod 65536 over header (checksum field zeroed) plus payload."""
    header = _SEG_HEADER.pack(kind, seq, len(payload), 0)
    return (sum(header) + sum(payload)) & 0xFFFF


@dataclass(frozen=True)
class Segment:
    kind: SegKind
    seq: int
    payload: bytes = b""
    checksum: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SegKind(self.kind))
        object.__setattr__(self, "payload", bytes(self.payload))
        if not 0 <= self.seq < _SEQ_LIMIT:
            raise ValueError(f"seq out of u32 range: {self.seq}")
        if len(self.payload) > MAX_SEGMENT_PAYLOAD:
            raise ValueError("segment payload exceeds u16 length field")
        if self.kind is SegKind.ACK and self.payload:
            raise ValueError("ack segments carry no payload")

    @property
    def valid(self) -> bool:
        """True when the carried checksum matches the recomputed one."""
        return self.checksum == segment_sum(self.kind, self.seq, self.payload)


def data_segment(seq: int, payload: bytes) -> Segment:
    return Segment(SegKind.DATA, seq, payload, segment_sum(SegKind.DATA, seq, payload))


def ack_segment(next_expected: int) -> Segment:
    return Segment(SegKind.ACK, next_expected, b"", segment_sum(SegKind.ACK, next_expected, b""))


def encode_segment(seg: Segment) -> bytes:
    return _SEG_HEADER.pack(seg.kind, seg.seq, len(seg.payload), seg.checksum) + seg.payload


def decode_segment(data: bytes) -> Segment:
    """Parse one whole datagram as a segment.

    Structural damage (bad kind, size mismatch) raises; a wrong checksum does
    not -- the receiver state machine owns that so it can still answer with a
    cumulative ack.
    """
    data = bytes(data)
    if len(data) < SEGMENT_HEADER_SIZE:
        raise LengthMismatch(f"segment needs {SEGMENT_HEADER_SIZE} header bytes, got {len(data)}")
    kind_byte, seq, length, checksum = _SEG_HEADER.unpack_from(data)
    try:
        kind = SegKind(kind_byte)
    except ValueError:
        raise UnknownKind(f"segment kind 0x{kind_byte:02x}") from None
    if len(data) != SEGMENT_HEADER_SIZE + length:
        raise LengthMismatch(
            f"declared {length} payload bytes in a {len(data)}-byte datagram"
        )
    if kind is SegKind.ACK and length:
        raise LengthMismatch("ack segment with payload")
    return Segment(kind, seq, data[SEGMENT_HEADER_SIZE:], checksum)


class GbnSender:
    """Sending side: window of W unacked segments, one retransmission timer."""

    def __init__(self, window: int, timeout_ticks: int):
        if window < 1:
            raise ValueError("window must be >= 1")
        if timeout_ticks < 1:
            raise ValueError("timeout_ticks must be >= 1")
        self.window = window
        self.timeout_ticks = timeout_ticks
        self.base = 0
        self.next_seq = 0
        self.timer_expiry: int | None = None
        self._unacked: deque[Segment] = deque()

    @property
    def can_send(self) -> bool:
        return self.next_seq < self.base + self.window

    @property
    def in_flight(self) -> int:
        return self.next_seq - self.base

    def send(self, payload: bytes, now: int) -> Segment:
        """Buffer and return DATA(next_seq); arm the timer if it was idle.

        Raises:
            WindowFull: the window already holds W unacked segments.
        """
        if not self.can_send:
            raise WindowFull(f"window [{self.base}, {self.base + self.window}) is full")
        if self.next_seq >= _SEQ_LIMIT:
            raise OverflowError("sequence space exhausted; wraparound is not supported")
        seg = data_segment(self.next_seq, payload)
        self._unacked.append(seg)
        self.next_seq += 1
        if self.timer_expiry is None:
            self.timer_expiry = now + self.timeout_ticks
        return seg

    def on_ack(self, ack_seq: int, now: int) -> None:
        """Apply a cumulative ack; stale or too-far acks are no-ops."""
        if not self.base < ack_seq <= self.next_seq:
            return
        for _ in range(ack_seq - self.base):
            self._unacked.popleft()
        self.base = ack_seq
        self.timer_expiry = now + self.timeout_ticks if self.base < self.next_seq else None

    def on_tick(self, now: int) -> list[Segment]:
        """Return the whole unacked window for retransmission when the timer fires."""
        if self.timer_expiry is None or now < self.timer_expiry:
            return []
        self.timer_expiry = now + self.timeout_ticks
        return list(self._unacked)


class GbnReceiver:
    """Receiving side: accepts only the in-order segment, acks cumulatively."""

    def __init__(self):
        self.expected = 0

    def on_segment(self, seg: Segment) -> tuple[list[bytes], Segment]:
        """Process a DATA segment.

        In-order valid data is delivered and bumps ``expected``; anything else
        (out-of-order or corrupt) is discarded.  Either way the reply is
        ACK(expected).
        """
        if seg.kind is not SegKind.DATA:
            raise ValueError("receiver handles DATA segments only")
        delivered: list[bytes] = []
        if seg.valid and seg.seq == self.expected:
            delivered.append(seg.payload)
            self.expected += 1
        return delivered, ack_segment(self.expected)


@dataclass
class TransferStats:
    """Outcome of one simulated transfer."""

    delivered_count: int
    retransmissions: int
    ticks_elapsed: int
    completed: bool
    delivered: list[bytes] = field(default_factory=list)


def _ack_config(config: ChannelConfig) -> ChannelConfig:
    seed = (config.seed ^ _ACK_SEED_SALT) or _ACK_SEED_SALT
    return replace(config, seed=seed)


def run_transfer(
    payloads: Sequence[bytes],
    config: ChannelConfig,
    window: int = 8,
    timeout_ticks: int = 8,
    max_ticks: int = 100_000,
) -> TransferStats:
    """Push ``payloads`` through a lossy data path and ack path until done.

    Per tick, in a fixed order: apply acks that arrived, run the
    retransmission timer, fill the window with new sends, then let the
    receiver process arriving data and emit acks.  Datagrams pushed at tick t
    are visible to pops at t+1 or later, so a zero-delay round trip still
    costs two ticks.

    Stops when everything is delivered or ``max_ticks`` runs out; an
    incomplete run is reported in the stats, not raised.
    """
    if max_ticks <= 0:
        raise ValueError("max_ticks must be positive")
    sender = GbnSender(window, timeout_ticks)
    receiver = GbnReceiver()
    data_path = LossyChannel(config)
    ack_path = LossyChannel(_ack_config(config))
    pending = deque(payloads)
    delivered: list[bytes] = []
    retransmissions = 0
    total = len(payloads)
    now = 0
    while now < max_ticks and len(delivered) < total:
        for raw in ack_path.pop_ready(now):
            try:
                seg = decode_segment(raw)
            except (LengthMismatch, UnknownKind):
                continue
            if seg.kind is SegKind.ACK and seg.valid:
                sender.on_ack(seg.seq, now)
        arrived = data_path.pop_ready(now)
        for seg in sender.on_tick(now):
            data_path.push(encode_segment(seg), now)
            retransmissions += 1
        while pending and sender.can_send:
            seg = sender.send(pending.popleft(), now)
            data_path.push(encode_segment(seg), now)
        for raw in arrived:
            try:
                seg = decode_segment(raw)
            except (LengthMismatch, UnknownKind):
                continue
            if seg.kind is not SegKind.DATA:
                continue
            outs, ack = receiver.on_segment(seg)
            delivered.extend(outs)
            ack_path.push(encode_segment(ack), now)
        now += 1
    return TransferStats(
        delivered_count=len(delivered),
        retransmissions=retransmissions,
        ticks_elapsed=now,
        completed=len(delivered) == total,
        delivered=delivered,
    )
