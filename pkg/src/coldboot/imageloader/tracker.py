"""Tracker service: block-holder catalog plus per-image access traces.

:class:`Tracker` is the in-process implementation.  :class:`TrackerServer`
exposes it over :mod:`coldboot.wire`; :class:`TrackerClient` is a drop-in
replacement for a local ``Tracker`` instance.  :class:`PeerServer` and
:class:`RemotePeer` carry ``GET`` requests between loader nodes.
"""
from __future__ import annotations

import hashlib
import threading
from collections import defaultdict

from ..errors import NotFound, ProtocolError
from ..wire import FrameClient, FrameServer, Kind


class Tracker:
    def __init__(self):
        self._holders: dict[str, set[str]] = defaultdict(set)
        self._traces: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def announce(self, block_id: str, node_id: str) -> None:
        with self._lock:
            self._holders[block_id].add(node_id)

    def locate(self, block_id: str) -> list[str]:
        with self._lock:
            return sorted(self._holders.get(block_id, ()))

    def withdraw(self, node_id: str) -> None:
        with self._lock:
            for holders in self._holders.values():
                holders.discard(node_id)

    def put_trace(self, image_id: str, payload: bytes) -> None:
        with self._lock:
            self._traces[image_id] = bytes(payload)

    def get_trace(self, image_id: str) -> bytes:
        with self._lock:
            try:
                return self._traces[image_id]
            except KeyError:
                raise NotFound(f"no trace recorded for image {image_id}") from None


def _tracker_handler(tracker: Tracker):
    def handle(kind, fields):
        if kind == Kind.ANNOUNCE:
            tracker.announce(fields[0].decode(), fields[1].decode())
            return []
        if kind == Kind.LOCATE:
            return [h.encode() for h in tracker.locate(fields[0].decode())]
        if kind == Kind.PUT_TRACE:
            tracker.put_trace(fields[0].decode(), fields[1])
            return []
        if kind == Kind.GET_TRACE:
            return [tracker.get_trace(fields[0].decode())]
        raise ProtocolError(f"tracker does not handle kind {kind:#x}")
    return handle


class TrackerServer(FrameServer):
    def __init__(self, tracker: Tracker | None = None, address=("127.0.0.1", 0)):
        self.tracker = tracker or Tracker()
        super().__init__(address, _tracker_handler(self.tracker))


class TrackerClient:
    def __init__(self, endpoint: str):
        self._client = FrameClient(endpoint)

    def announce(self, block_id, node_id):
        self._client.call(Kind.ANNOUNCE, block_id.encode(), node_id.encode())

    def locate(self, block_id):
        return [f.decode() for f in self._client.call(Kind.LOCATE, block_id.encode())]

    def put_trace(self, image_id, payload):
        self._client.call(Kind.PUT_TRACE, image_id.encode(), payload)

    def get_trace(self, image_id):
        return self._client.call(Kind.GET_TRACE, image_id.encode())[0]

    def close(self):
        self._client.close()


class PeerServer(FrameServer):
    """Serves ``GET(block)`` from a loader node's local blocks."""

    def __init__(self, node, address=("127.0.0.1", 0)):
        self.node = node

        def handle(kind, fields):
            if kind != Kind.GET:
                raise ProtocolError(f"peer does not handle kind {kind:#x}")
            data, digest = node.serve_block(fields[0].decode())
            return [data, bytes.fromhex(digest)]

        super().__init__(address, handle)


class RemotePeer:
    def __init__(self, endpoint: str):
        self._client = FrameClient(endpoint)

    def get_block(self, block_id: str) -> tuple[bytes, str]:
        data, digest = self._client.call(Kind.GET, block_id.encode())
        return data, digest.hex()

    def close(self):
        self._client.close()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
