"""Moving model parameters between server and clients.

Two transports share one interface: :class:`InProcessTransport` hands over
copies of the arrays, :class:`StreamTransport` encodes every message as a
length-prefixed frame on a byte stream::

    u32 length (LE) | u8 kind | [u16 client id | u64 n_samples]  (updates only) | FGCK checkpoint

Only parameter mappings and :class:`RoundUpdate` objects are accepted, so raw
training data has no way onto the wire.
"""
from __future__ import annotations

import struct
import threading
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .serialize import FormatError, checkpoint_from_bytes, checkpoint_to_bytes

KIND_BROADCAST = 0
KIND_UPDATE = 1
MAX_FRAME = 1 << 30


class FramingError(ValueError):
    def __init__(self, message: str, expected: int | None = None, actual: int | None = None):
        self.expected, self.actual = expected, actual
        if expected is not None:
            message = f"{message} (expected {expected} bytes, got {actual})"
        super().__init__(message)


@dataclass
class RoundUpdate:
    client_id: int
    round: int
    params: "OrderedDict[str, np.ndarray]"
    n_samples: int


def _check_params(params) -> None:
    if not isinstance(params, Mapping) or not all(
            isinstance(k, str) and isinstance(v, np.ndarray) for k, v in params.items()):
        raise TypeError("only model parameter mappings (name -> ndarray) may cross the transport")


def _copy(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, np.array(v, dtype=np.float32, copy=True)) for k, v in params.items())


# ---------------------------------------------------------------------------
# framing


def encode_frame(kind: int, params, client_id: int = 0, n_samples: int = 0) -> bytes:
    _check_params(params)
    if kind == KIND_BROADCAST:
        head = struct.pack("<B", kind)
    elif kind == KIND_UPDATE:
        head = struct.pack("<BHQ", kind, client_id, n_samples)
    else:
        raise ValueError(f"unknown message kind {kind}")
    body = head + checkpoint_to_bytes(params)
    return struct.pack("<I", len(body)) + body


def decode_body(body: bytes):
    """-> (kind, client_id, n_samples, params)"""
    if not body:
        raise FramingError("empty frame body")
    kind = body[0]
    if kind == KIND_BROADCAST:
        offset, cid, n = 1, 0, 0
    elif kind == KIND_UPDATE:
        if len(body) < 11:
            raise FramingError("update frame header truncated", 11, len(body))
        _, cid, n = struct.unpack_from("<BHQ", body)
        offset = 11
    else:
        raise FramingError(f"unknown message kind {kind}")
    try:
        params = checkpoint_from_bytes(body[offset:])
    except FormatError as exc:
        raise FramingError(f"bad checkpoint payload: {exc}") from exc
    return kind, cid, n, params


def read_frame(stream):
    """Read one frame from a stream with ``read(n)`` semantics."""
    prefix = stream.read(4)
    if prefix is None or len(prefix) != 4:
        raise FramingError("truncated length prefix", 4, 0 if prefix is None else len(prefix))
    (length,) = struct.unpack("<I", prefix)
    if length > MAX_FRAME:
        raise FramingError(f"frame length {length} exceeds limit {MAX_FRAME}")
    body = stream.read(length)
    got = 0 if body is None else len(body)
    if got != length:
        raise FramingError("truncated frame", length, got)
    return decode_body(body)


def write_frame(stream, frame: bytes) -> None:
    if hasattr(stream, "sendall"):
        stream.sendall(frame)
    else:
        stream.write(frame)


class BytePipe:
    """Unbounded in-memory byte stream; ``read`` blocks until enough bytes or close."""

    def __init__(self):
        self._buf = bytearray()
        self._closed = False
        self._cv = threading.Condition()

    def write(self, data: bytes) -> int:
        with self._cv:
            if self._closed:
                raise BrokenPipeError("write to closed pipe")
            self._buf += data
            self._cv.notify_all()
        return len(data)

    def read(self, n: int) -> bytes:
        with self._cv:
            while len(self._buf) < n and not self._closed:
                self._cv.wait()
            out = bytes(self._buf[:n])
            del self._buf[:n]
            return out

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def pending(self) -> int:
        with self._cv:
            return len(self._buf)


class SocketStream:
    """``read(n)``/``write`` over a connected socket."""

    def __init__(self, sock):
        self.sock = sock

    def write(self, data: bytes) -> int:
        self.sock.sendall(data)
        return len(data)

    def read(self, n: int) -> bytes:
        parts, remaining = [], n
        while remaining > 0:
            part = self.sock.recv(remaining)
            if not part:
                break
            parts.append(part)
            remaining -= len(part)
        return b"".join(parts)


# ---------------------------------------------------------------------------
# transports


class InProcessTransport:
    def __init__(self):
        self._down: dict[int, deque] = {}
        self._up: deque = deque()
        self._lock = threading.Lock()

    def connect(self, client_ids) -> None:
        for cid in client_ids:
            self._down.setdefault(cid, deque())

    def broadcast(self, params) -> None:
        _check_params(params)
        for q in self._down.values():
            q.append(_copy(params))

    def recv_broadcast(self, client_id: int):
        return self._down[client_id].popleft()

    def send_update(self, update: RoundUpdate) -> None:
        if not isinstance(update, RoundUpdate):
            raise TypeError("only RoundUpdate objects may be sent to the server")
        _check_params(update.params)
        with self._lock:
            self._up.append(RoundUpdate(update.client_id, update.round, _copy(update.params), update.n_samples))

    def recv_updates(self, round_index: int) -> list:
        with self._lock:
            out = list(self._up)
            self._up.clear()
        return [RoundUpdate(u.client_id, round_index, u.params, u.n_samples) for u in out]


class StreamTransport:
    """Frames over per-client byte streams (in-memory pipes unless given)."""

    def __init__(self, stream_factory=BytePipe):
        self._factory = stream_factory
        self._down: dict = {}
        self._up: dict = {}
        self.bytes_sent = 0

    def connect(self, client_ids) -> None:
        for cid in client_ids:
            if cid not in self._down:
                self._down[cid] = self._factory()
                self._up[cid] = self._factory()

    def broadcast(self, params) -> None:
        frame = encode_frame(KIND_BROADCAST, params)
        for cid in sorted(self._down):
            write_frame(self._down[cid], frame)
            self.bytes_sent += len(frame)

    def recv_broadcast(self, client_id: int):
        kind, _, _, params = read_frame(self._down[client_id])
        if kind != KIND_BROADCAST:
            raise FramingError(f"client {client_id} expected a broadcast frame, got kind {kind}")
        return params

    def send_update(self, update: RoundUpdate) -> None:
        if not isinstance(update, RoundUpdate):
            raise TypeError("only RoundUpdate objects may be sent to the server")
        frame = encode_frame(KIND_UPDATE, update.params, update.client_id, update.n_samples)
        write_frame(self._up[update.client_id], frame)
        self.bytes_sent += len(frame)

    def recv_updates(self, round_index: int) -> list:
        out = []
        for cid in sorted(self._up):
            stream = self._up[cid]
            if isinstance(stream, BytePipe) and stream.pending() == 0:
                continue
            kind, sender, n, params = read_frame(stream)
            if kind != KIND_UPDATE:
                raise FramingError(f"server expected an update frame from client {cid}, got kind {kind}")
            out.append(RoundUpdate(sender, round_index, params, n))
        return out


def make_transport(name: str):
    if name in ("inprocess", "in-process", "queue"):
        return InProcessTransport()
    if name in ("stream", "bytes", "byte-stream"):
        return StreamTransport()
    raise ValueError(f"unknown transport {name!r}; expected 'inprocess' or 'stream'")
