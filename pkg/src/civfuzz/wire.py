"""Monitor <-> adapter wire protocol.

Bit-exact message codec shared by every target adapter (the simulated
runtime encodes with this module; the native preload shim reimplements the
same layout in C).  All integers are little-endian.

Frame:       u32 payload_length, then payload.
Event tags:  0x01 Ready        u32 run_id, u16 protocol_version, u16 word_size_bits
             0x02 CallEntry    } u32 crossing_index, str symbol,
             0x03 CallExit     } u16 n_values  of (locus, u32 len, bytes),
             0x04 CallbackEntry} u16 n_snapshots of (u32 region_id, u32 len, bytes)
             0x05 CallbackExit }
             0x06 CrashReport  u32 crossing_index, u8 access_kind, u8 has_addr,
                               u64 faulty_address, u16 n_frames of (str label, u64 offset)
             0x07 WorkloadDone u32 crossing_index
Command tags 0x81 Proceed
             0x82 Alter        u16 n of (locus, u32 len, bytes)
             0x83 SkipCall     u32 len, bytes  (synthetic return)
             0x84 Terminate
Locus:       u8 kind: 1 Arg(u16 index), 2 ReturnValue, 3 CallbackArg(u16 index),
             4 CallbackReturn, 5 SharedByte(u32 region_id, u32 offset)
str:         u16 length, utf-8 bytes.

Sessions are strictly synchronous: the adapter blocks the target at each
crossing until exactly one command arrives.  CrashReport and WorkloadDone
end the run and are answered with Terminate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol

from .errors import CodecError, FrameError, HandshakeTimeout, VersionMismatch

PROTOCOL_VERSION = 1
MAX_FRAME = 1 << 20


class EventKind(Enum):
    READY = 0x01
    CALL_ENTRY = 0x02
    CALL_EXIT = 0x03
    CALLBACK_ENTRY = 0x04
    CALLBACK_EXIT = 0x05
    CRASH_REPORT = 0x06
    WORKLOAD_DONE = 0x07


class CommandKind(Enum):
    PROCEED = 0x81
    ALTER = 0x82
    SKIP_CALL = 0x83
    TERMINATE = 0x84


class LocusKind(Enum):
    ARG = 1
    RETURN_VALUE = 2
    CALLBACK_ARG = 3
    CALLBACK_RETURN = 4
    SHARED_BYTE = 5


class AccessKind(Enum):
    READ = 1
    WRITE = 2
    EXEC = 3
    ALLOC_MISUSE = 4
    NULL_DEREF = 5
    DEADLOCK = 6


CROSSING_EVENTS = frozenset(
    {EventKind.CALL_ENTRY, EventKind.CALL_EXIT, EventKind.CALLBACK_ENTRY, EventKind.CALLBACK_EXIT}
)


@dataclass(frozen=True)
class Locus:
    kind: LocusKind
    index: int = 0          # Arg / CallbackArg
    region: int = 0         # SharedByte
    offset: int = 0         # SharedByte

    def __repr__(self) -> str:
        if self.kind in (LocusKind.ARG, LocusKind.CALLBACK_ARG):
            return f"{self.kind.name}({self.index})"
        if self.kind is LocusKind.SHARED_BYTE:
            return f"SHARED_BYTE(r{self.region}+{self.offset})"
        return self.kind.name


def arg(i: int) -> Locus:
    return Locus(LocusKind.ARG, index=i)


def return_value() -> Locus:
    return Locus(LocusKind.RETURN_VALUE)


def callback_arg(i: int) -> Locus:
    return Locus(LocusKind.CALLBACK_ARG, index=i)


def callback_return() -> Locus:
    return Locus(LocusKind.CALLBACK_RETURN)


def shared_byte(region: int, offset: int) -> Locus:
    return Locus(LocusKind.SHARED_BYTE, region=region, offset=offset)


@dataclass(frozen=True)
class StackFrame:
    label: str
    offset: int


@dataclass(frozen=True)
class CrashPayload:
    access_kind: AccessKind
    faulty_address: Optional[int]
    frames: tuple[StackFrame, ...]


@dataclass(frozen=True)
class Event:
    kind: EventKind
    crossing_index: int = 0
    symbol: str = ""
    values: tuple[tuple[Locus, bytes], ...] = ()
    snapshots: tuple[tuple[int, bytes], ...] = ()
    crash: Optional[CrashPayload] = None
    run_id: int = 0
    protocol_version: int = PROTOCOL_VERSION
    word_size_bits: int = 64

    @property
    def is_crossing(self) -> bool:
        return self.kind in CROSSING_EVENTS


@dataclass(frozen=True)
class Command:
    kind: CommandKind
    directives: tuple[tuple[Locus, bytes], ...] = ()
    synthetic_return: bytes = b""


PROCEED = Command(CommandKind.PROCEED)
TERMINATE = Command(CommandKind.TERMINATE)


@dataclass(frozen=True)
class SessionInfo:
    protocol_version: int
    word_size_bits: int
    run_id: int


# ---------------------------------------------------------------------------
# codec


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_locus(locus: Locus) -> bytes:
    out = struct.pack("<B", locus.kind.value)
    if locus.kind in (LocusKind.ARG, LocusKind.CALLBACK_ARG):
        out += struct.pack("<H", locus.index)
    elif locus.kind is LocusKind.SHARED_BYTE:
        out += struct.pack("<II", locus.region, locus.offset)
    return out


def _pack_blob(raw: bytes) -> bytes:
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CodecError("payload truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def blob(self) -> bytes:
        return self.take(self.u32())

    def locus(self) -> Locus:
        try:
            kind = LocusKind(self.u8())
        except ValueError as e:
            raise CodecError(f"unknown locus kind: {e}")
        if kind in (LocusKind.ARG, LocusKind.CALLBACK_ARG):
            return Locus(kind, index=self.u16())
        if kind is LocusKind.SHARED_BYTE:
            region = self.u32()
            return Locus(kind, region=region, offset=self.u32())
        return Locus(kind)

    def done(self) -> None:
        if self.pos != len(self.raw):
            raise CodecError(f"{len(self.raw) - self.pos} trailing bytes in payload")


def encode(message: Event | Command) -> bytes:
    """Encode a message including its length-prefixed frame header."""
    if isinstance(message, Event):
        payload = _encode_event(message)
    elif isinstance(message, Command):
        payload = _encode_command(message)
    else:
        raise CodecError(f"cannot encode {type(message).__name__}")
    return struct.pack("<I", len(payload)) + payload


def _encode_event(ev: Event) -> bytes:
    out = struct.pack("<B", ev.kind.value)
    if ev.kind is EventKind.READY:
        out += struct.pack("<IHH", ev.run_id, ev.protocol_version, ev.word_size_bits)
    elif ev.kind in CROSSING_EVENTS:
        out += struct.pack("<I", ev.crossing_index)
        out += _pack_str(ev.symbol)
        out += struct.pack("<H", len(ev.values))
        for locus, raw in ev.values:
            out += _pack_locus(locus) + _pack_blob(raw)
        out += struct.pack("<H", len(ev.snapshots))
        for rid, raw in ev.snapshots:
            out += struct.pack("<I", rid) + _pack_blob(raw)
    elif ev.kind is EventKind.CRASH_REPORT:
        crash = ev.crash
        if crash is None:
            raise CodecError("CrashReport event without payload")
        out += struct.pack("<I", ev.crossing_index)
        out += struct.pack(
            "<BBQ",
            crash.access_kind.value,
            1 if crash.faulty_address is not None else 0,
            crash.faulty_address or 0,
        )
        out += struct.pack("<H", len(crash.frames))
        for frame in crash.frames:
            out += _pack_str(frame.label) + struct.pack("<Q", frame.offset)
    elif ev.kind is EventKind.WORKLOAD_DONE:
        out += struct.pack("<I", ev.crossing_index)
    return out


def _encode_command(cmd: Command) -> bytes:
    out = struct.pack("<B", cmd.kind.value)
    if cmd.kind is CommandKind.ALTER:
        out += struct.pack("<H", len(cmd.directives))
        for locus, raw in cmd.directives:
            out += _pack_locus(locus) + _pack_blob(raw)
    elif cmd.kind is CommandKind.SKIP_CALL:
        out += _pack_blob(cmd.synthetic_return)
    return out


def decode(frame: bytes) -> Event | Command:
    """Decode one full frame (length prefix included)."""
    if len(frame) < 4:
        raise FrameError(f"frame header needs 4 bytes, got {len(frame)}")
    (length,) = struct.unpack("<I", frame[:4])
    if length > MAX_FRAME:
        raise FrameError(f"frame length {length} exceeds cap {MAX_FRAME}")
    if len(frame) != 4 + length:
        raise FrameError(f"frame advertises {length} payload bytes, carries {len(frame) - 4}")
    return decode_payload(frame[4:])


def decode_payload(payload: bytes) -> Event | Command:
    if not payload:
        raise CodecError("empty payload")
    r = _Reader(payload)
    tag = r.u8()
    if tag >= 0x80:
        try:
            kind = CommandKind(tag)
        except ValueError:
            raise CodecError(f"unknown command tag {tag:#x}")
        cmd = _decode_command(kind, r)
        r.done()
        return cmd
    try:
        ekind = EventKind(tag)
    except ValueError:
        raise CodecError(f"unknown event tag {tag:#x}")
    ev = _decode_event(ekind, r)
    r.done()
    return ev


def _decode_event(kind: EventKind, r: _Reader) -> Event:
    if kind is EventKind.READY:
        run_id = r.u32()
        ver = r.u16()
        word = r.u16()
        return Event(kind, run_id=run_id, protocol_version=ver, word_size_bits=word)
    if kind in CROSSING_EVENTS:
        crossing = r.u32()
        symbol = r.string()
        values = tuple((r.locus(), r.blob()) for _ in range(r.u16()))
        snaps = tuple((r.u32(), r.blob()) for _ in range(r.u16()))
        return Event(kind, crossing_index=crossing, symbol=symbol, values=values, snapshots=snaps)
    if kind is EventKind.CRASH_REPORT:
        crossing = r.u32()
        try:
            access = AccessKind(r.u8())
        except ValueError as e:
            raise CodecError(f"unknown access kind: {e}")
        has_addr = r.u8()
        addr = r.u64()
        frames = tuple(StackFrame(r.string(), r.u64()) for _ in range(r.u16()))
        crash = CrashPayload(access, addr if has_addr else None, frames)
        return Event(kind, crossing_index=crossing, crash=crash)
    # WorkloadDone
    return Event(kind, crossing_index=r.u32())


def _decode_command(kind: CommandKind, r: _Reader) -> Command:
    if kind is CommandKind.ALTER:
        directives = tuple((r.locus(), r.blob()) for _ in range(r.u16()))
        return Command(kind, directives=directives)
    if kind is CommandKind.SKIP_CALL:
        return Command(kind, synthetic_return=r.blob())
    return Command(kind)


# ---------------------------------------------------------------------------
# sessions


class Channel(Protocol):
    """A pair of unidirectional byte streams between monitor and adapter."""

    def send_bytes(self, raw: bytes) -> None: ...

    def recv_frame(self, timeout: Optional[float]) -> bytes: ...

    def close(self) -> None: ...


class Session:
    """Monitor-side view of one adapter run."""

    def __init__(self, channel: Channel, timeout: Optional[float] = 10.0):
        self._channel = channel
        self._timeout = timeout
        self.dead = False
        self.info: Optional[SessionInfo] = None

    def handshake(self) -> SessionInfo:
        try:
            frame = self._channel.recv_frame(self._timeout)
        except TimeoutError:
            self.dead = True
            raise HandshakeTimeout(f"no Ready event within {self._timeout}s")
        msg = self._decode(frame)
        if not isinstance(msg, Event) or msg.kind is not EventKind.READY:
            self.dead = True
            raise HandshakeTimeout(f"expected Ready, got {msg}")
        if msg.protocol_version != PROTOCOL_VERSION:
            self.dead = True
            raise VersionMismatch(
                f"adapter speaks v{msg.protocol_version}, monitor v{PROTOCOL_VERSION}"
            )
        self.info = SessionInfo(msg.protocol_version, msg.word_size_bits, msg.run_id)
        return self.info

    def recv_event(self) -> Event:
        msg = self._decode(self._channel.recv_frame(self._timeout))
        if not isinstance(msg, Event):
            self.dead = True
            raise FrameError(f"expected event, got command {msg.kind}")
        return msg

    def send_command(self, cmd: Command) -> None:
        self._channel.send_bytes(encode(cmd))

    def close(self) -> None:
        self._channel.close()

    def _decode(self, frame: bytes) -> Event | Command:
        try:
            return decode(frame)
        except (FrameError, CodecError):
            self.dead = True
            raise
