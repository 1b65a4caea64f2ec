"""Coordinator <-> platform messages and the channels that carry them.

Wire format (one frame per message)::

    offset  size  field
    0       4     frame length N, unsigned big-endian, counts every byte after it
    4       1     protocol version (1)
    5       1     message kind (see Kind)
    6       4     sender id, unsigned little-endian
    10      ...   kind-specific body, little-endian

Bodies:

    REGISTER         u64 local sample count
    ROUND_START      u32 round, u32 batch size, u64 n, n x f64 shared parameters
    GRADIENT         u32 platform, u32 round, u64 sample weight, f64 loss,
                     u64 n, n x f64 gradient
    MODEL_BROADCAST  u32 round, u64 n, n x f64 shared parameters
    SHUTDOWN         (empty)

Floats are IEEE-754 binary64, so values round-trip bit for bit. Non-finite
values are refused at encode time. Only parameter vectors and gradient
packets are representable; no message carries tokens or tags.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

VERSION = 1

_HEADER = struct.Struct(">I")
_PREFIX = struct.Struct("<BBI")


class Kind(enum.IntEnum):
    REGISTER = 1
    ROUND_START = 2
    GRADIENT = 3
    MODEL_BROADCAST = 4
    SHUTDOWN = 5


class DecodeError(ValueError):
    pass


class TruncatedFrame(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class BadKind(DecodeError):
    pass


class ChannelClosed(ConnectionError):
    pass


def _finite_vector(values, what) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype="<f8").reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains NaN or infinite values")
    return arr


@dataclass(frozen=True, eq=False)
class GradientPacket:
    """Gradient of a platform's mean batch loss with respect to the shared parameters."""

    platform: int
    round: int
    gradient: np.ndarray
    weight: int  # local training-set size |S_i|
    loss: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gradient", _finite_vector(self.gradient, "gradient"))
        if not np.isfinite(self.loss):
            raise ValueError("loss is not finite")
        if self.weight < 1:
            raise ValueError("sample weight must be at least 1")

    def __eq__(self, other):
        if not isinstance(other, GradientPacket):
            return NotImplemented
        return (
            (self.platform, self.round, self.weight) == (other.platform, other.round, other.weight)
            and np.float64(self.loss).tobytes() == np.float64(other.loss).tobytes()
            and self.gradient.tobytes() == other.gradient.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Message:
    kind: Kind
    sender: int = 0
    round: int = 0
    batch: int = 0
    count: int = 0
    params: Optional[np.ndarray] = None
    packet: Optional[GradientPacket] = field(default=None)

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        mine = (self.kind, self.sender, self.round, self.batch, self.count, self.packet)
        theirs = (other.kind, other.sender, other.round, other.batch, other.count, other.packet)
        if mine != theirs:
            return False
        if (self.params is None) != (other.params is None):
            return False
        return self.params is None or self.params.tobytes() == other.params.tobytes()


def register(sender: int, count: int) -> Message:
    return Message(Kind.REGISTER, sender=sender, count=count)


def round_start(round_no: int, params, batch: int) -> Message:
    return Message(Kind.ROUND_START, round=round_no, batch=batch, params=_finite_vector(params, "params"))


def gradient(packet: GradientPacket) -> Message:
    return Message(Kind.GRADIENT, sender=packet.platform, packet=packet)


def broadcast(round_no: int, params) -> Message:
    return Message(Kind.MODEL_BROADCAST, round=round_no, params=_finite_vector(params, "params"))


def shutdown() -> Message:
    return Message(Kind.SHUTDOWN)


def _vec_bytes(arr) -> bytes:
    arr = _finite_vector(arr, "payload")
    return struct.pack("<Q", arr.size) + arr.tobytes()


def encode(msg: Message) -> bytes:
    kind = Kind(msg.kind)
    body = _PREFIX.pack(VERSION, kind, msg.sender)
    if kind == Kind.REGISTER:
        body += struct.pack("<Q", msg.count)
    elif kind == Kind.ROUND_START:
        body += struct.pack("<II", msg.round, msg.batch) + _vec_bytes(msg.params)
    elif kind == Kind.GRADIENT:
        p = msg.packet
        if not np.isfinite(p.loss):
            raise ValueError("loss is not finite")
        body += struct.pack("<IIQd", p.platform, p.round, p.weight, p.loss) + _vec_bytes(p.gradient)
    elif kind == Kind.MODEL_BROADCAST:
        body += struct.pack("<I", msg.round) + _vec_bytes(msg.params)
    return _HEADER.pack(len(body)) + body


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise TruncatedFrame(f"frame ends before {fmt!r} field at byte {self.offset}")
        out = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return out

    def vector(self) -> np.ndarray:
        (n,) = self.take("<Q")
        size = 8 * n
        if self.offset + size > len(self.data):
            raise TruncatedFrame(f"vector of {n} floats runs past the frame end")
        arr = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.offset).astype(np.float64)
        self.offset += size
        if not np.all(np.isfinite(arr)):
            raise DecodeError("vector contains NaN or infinite values")
        return arr


def decode_frame(data: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode the frame starting at `offset`; return it and the offset just past it."""
    if len(data) - offset < _HEADER.size:
        raise TruncatedFrame("missing length prefix")
    (length,) = _HEADER.unpack_from(data, offset)
    end = offset + _HEADER.size + length
    if end > len(data):
        raise TruncatedFrame(f"frame declares {length} bytes, {len(data) - offset - 4} available")
    frame = data[: end]
    r = _Reader(frame, offset + _HEADER.size)
    version, kind_tag, sender = r.take("<BBI")
    if version != VERSION:
        raise BadVersion(f"protocol version {version}, expected {VERSION}")
    try:
        kind = Kind(kind_tag)
    except ValueError:
        raise BadKind(f"unknown message kind {kind_tag}") from None
    if kind == Kind.REGISTER:
        (count,) = r.take("<Q")
        msg = Message(kind, sender=sender, count=count)
    elif kind == Kind.ROUND_START:
        round_no, batch = r.take("<II")
        msg = Message(kind, sender=sender, round=round_no, batch=batch, params=r.vector())
    elif kind == Kind.GRADIENT:
        platform, round_no, weight, loss = r.take("<IIQd")
        try:
            packet = GradientPacket(platform, round_no, r.vector(), weight, loss)
        except ValueError as exc:
            if isinstance(exc, DecodeError):
                raise
            raise DecodeError(f"invalid gradient packet: {exc}") from None
        msg = Message(kind, sender=sender, packet=packet)
    elif kind == Kind.MODEL_BROADCAST:
        (round_no,) = r.take("<I")
        msg = Message(kind, sender=sender, round=round_no, params=r.vector())
    else:
        msg = Message(kind, sender=sender)
    if r.offset != end:
        raise DecodeError(f"{end - r.offset} trailing bytes in {kind.name} frame")
    return msg, end


def decode(data: bytes) -> Message:
    msg, end = decode_frame(data)
    if end != len(data):
        raise DecodeError(f"{len(data) - end} bytes after the frame")
    return msg


def decode_stream(data: bytes) -> list[Message]:
    out, offset = [], 0
    while offset < len(data):
        msg, offset = decode_frame(data, offset)
        out.append(msg)
    return out


# -- channels ----------------------------------------------------------------------


class InProcessChannel:
    """One end of a queue pair; frames are encoded so both transports share one code path."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox

    def send(self, msg: Message) -> None:
        self._outbox.put(encode(msg))

    def recv(self, timeout: Optional[float] = None) -> Message:
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message received") from None
        if frame is None:
            raise ChannelClosed("peer closed the channel")
        return decode(frame)

    def close(self) -> None:
        self._outbox.put(None)


def in_process_pair() -> tuple[InProcessChannel, InProcessChannel]:
    """(coordinator end, platform end)."""
    a, b = queue.Queue(), queue.Queue()
    return InProcessChannel(a, b), InProcessChannel(b, a)


class SocketChannel:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send(self, msg: Message) -> None:
        try:
            self.sock.sendall(encode(msg))
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def _read(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except socket.timeout:
                raise TimeoutError("no message received") from None
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            if not chunk:
                raise ChannelClosed("connection closed by peer")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, timeout: Optional[float] = None) -> Message:
        self.sock.settimeout(timeout)
        head = self._read(_HEADER.size)
        (length,) = _HEADER.unpack(head)
        return decode(head + self._read(length))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class Listener:
    """Server socket that hands out one channel per accepted platform connection."""

    def __init__(self, addr: str):
        self.sock = socket.create_server(parse_address(addr))

    @property
    def address(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def accept(self, timeout: Optional[float] = None) -> SocketChannel:
        self.sock.settimeout(timeout)
        conn, _ = self.sock.accept()
        conn.settimeout(None)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketChannel(conn)

    def close(self) -> None:
        self.sock.close()


def socket_listen(addr: str) -> Listener:
    return Listener(addr)


def socket_connect(addr: str, timeout: float = 30.0) -> SocketChannel:
    sock = socket.create_connection(parse_address(addr), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketChannel(sock)
