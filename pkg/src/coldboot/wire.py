"""Length-prefixed binary framing used by the tracker, peers and the chunk store.

Frame layout (all integers little-endian)::

    u32 frame_len          # bytes that follow: 1 + len(body)
    u8  kind
    body: repeated field   # u32 field_len, then field_len raw bytes

Requests carry a request kind; the server answers with ``REPLY`` (fields are
the result) or ``ERROR`` (fields: error class name, message).  Integer
arguments travel as 8-byte little-endian fields (see :func:`u64`).
"""
from __future__ import annotations

import enum
import socket
import socketserver
import struct
import threading
from typing import Callable, Sequence

from .errors import ColdbootError, NotFound, ProtocolError

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
MAX_FRAME = 1 << 30


class Kind(enum.IntEnum):
    # tracker / peer family
    ANNOUNCE = 0x01
    LOCATE = 0x02
    GET = 0x03
    PUT_TRACE = 0x04
    GET_TRACE = 0x05
    # chunk-store family
    PUT_CHUNK = 0x10
    GET_CHUNK = 0x11
    PUT_MAP = 0x12
    GET_MAP = 0x13
    LIST = 0x14
    # responses
    REPLY = 0x80
    ERROR = 0x81


def u64(value: int) -> bytes:
    return _U64.pack(value)


def from_u64(field: bytes) -> int:
    if len(field) != 8:
        raise ProtocolError(f"expected 8-byte integer field, got {len(field)} bytes")
    return _U64.unpack(field)[0]


def encode_frame(kind: int, fields: Sequence[bytes] = ()) -> bytes:
    body = b"".join(_U32.pack(len(f)) + bytes(f) for f in fields)
    return _U32.pack(1 + len(body)) + bytes([kind]) + body


def decode_frame(frame: bytes) -> tuple[int, list[bytes]]:
    """Decode one frame *without* its leading u32 length."""
    if not frame:
        raise ProtocolError("empty frame")
    kind = frame[0]
    fields = []
    pos = 1
    while pos < len(frame):
        if pos + 4 > len(frame):
            raise ProtocolError("truncated field header")
        (n,) = _U32.unpack_from(frame, pos)
        pos += 4
        if pos + n > len(frame):
            raise ProtocolError("truncated field payload")
        fields.append(frame[pos:pos + n])
        pos += n
    return kind, fields


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            raise ConnectionError("peer closed connection")
        buf += part
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, list[bytes]]:
    (length,) = _U32.unpack(_recv_exact(sock, 4))
    if length == 0 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    return decode_frame(_recv_exact(sock, length))


def write_frame(sock: socket.socket, kind: int, fields: Sequence[bytes] = ()) -> None:
    sock.sendall(encode_frame(kind, fields))


Handler = Callable[[int, list], list]


class FrameServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server dispatching decoded frames to ``handler``.

    ``handler(kind, fields)`` returns reply fields or raises; a
    :class:`ColdbootError` becomes an ``ERROR`` frame and the connection stays
    open.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], handler: Handler):
        self.handler = handler
        super().__init__(address, _FrameRequestHandler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "FrameServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class _FrameRequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        while True:
            try:
                kind, fields = read_frame(sock)
            except (ConnectionError, OSError):
                return
            except ProtocolError as exc:
                write_frame(sock, Kind.ERROR, [b"ProtocolError", str(exc).encode()])
                return
            try:
                reply = self.server.handler(kind, fields)
            except ColdbootError as exc:
                write_frame(sock, Kind.ERROR, [type(exc).__name__.encode(), str(exc).encode()])
                continue
            write_frame(sock, Kind.REPLY, reply)


class FrameClient:
    """Blocking request/response client; one connection, serialized calls."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        host, _, port = endpoint.rpartition(":")
        self.endpoint = endpoint
        self._sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
        self._lock = threading.Lock()

    def call(self, kind: int, *fields: bytes) -> list[bytes]:
        with self._lock:
            write_frame(self._sock, kind, fields)
            rkind, rfields = read_frame(self._sock)
        if rkind == Kind.ERROR:
            name = rfields[0].decode() if rfields else "Error"
            msg = rfields[1].decode() if len(rfields) > 1 else ""
            if name == "NotFound":
                raise NotFound(msg)
            raise ProtocolError(f"{name}: {msg}")
        if rkind != Kind.REPLY:
            raise ProtocolError(f"unexpected reply kind {rkind:#x}")
        return rfields

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
