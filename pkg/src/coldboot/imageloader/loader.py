"""Loader node: lazy block faults, hot-set prefetch, background cold streaming.

A "container" here is an access-stream replayer.  Blocks come from peers
first, then an optional cluster cache, then the registry; every block is
verified against its digest before it is stored locally or announced.
"""
from __future__ import annotations

import enum
import logging
import random
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from ..blockstore import BlockId, BlockManifest, read_file_range
from ..errors import ColdbootError, FetchError, NotFound
from .trace import HotSet
from .tracker import sha256_hex

log = logging.getLogger(__name__)

DEFAULT_STREAM_WORKERS = 8


class Policy(str, enum.Enum):
    LAZY_ONLY = "lazy_only"
    PREFETCH = "prefetch"


@dataclass
class FetchMetrics:
    by_source: Counter = field(default_factory=Counter)
    bytes_by_source: Counter = field(default_factory=Counter)
    corrupt_responses: int = 0
    failed_sources: int = 0

    @property
    def remote_fetches(self) -> int:
        return sum(self.by_source.values())


class Node:
    """One worker node's block cache and fetch path.

    ``peers`` maps a node id (as announced to the tracker) to an object with
    ``get_block(id) -> (bytes, hex_digest)``; it may also be a callable.
    ``registry`` and ``cluster_cache`` need only ``get_block(id) -> bytes``.
    """

    def __init__(self, node_id: str, manifest: BlockManifest, tracker, registry,
                 peers: Mapping | Callable | None = None, cluster_cache=None, seed: int = 0):
        self.node_id = node_id
        self.manifest = manifest
        self.tracker = tracker
        self.registry = registry
        self.cluster_cache = cluster_cache
        self._peers = peers if peers is not None else {}
        self._rng = random.Random(f"{seed}:{node_id}")
        self._blocks: dict[BlockId, bytes] = {}
        self._inflight: dict[BlockId, threading.Event] = {}
        self._lock = threading.Lock()
        self.metrics = FetchMetrics()

    # local state -----------------------------------------------------------------
    def has(self, block_id: BlockId) -> bool:
        return block_id in self._blocks

    def local_blocks(self) -> set[BlockId]:
        with self._lock:
            return set(self._blocks)

    def serve_block(self, block_id: BlockId) -> tuple[bytes, str]:
        try:
            data = self._blocks[block_id]
        except KeyError:
            raise NotFound(f"node {self.node_id} does not hold {block_id}") from None
        return data, block_id

    def _resolve_peer(self, holder: str):
        if callable(self._peers):
            return self._peers(holder)
        return self._peers.get(holder)

    # fetch path ------------------------------------------------------------------
    def fetch_block(self, block_id: BlockId) -> tuple[bytes, str]:
        """Fetch from the cheapest verified source, store and announce.

        Returns ``(bytes, source_tag)`` with tag one of ``peer``, ``cache``,
        ``registry``.
        """
        holders = [h for h in self.tracker.locate(block_id) if h != self.node_id]
        self._rng.shuffle(holders)
        for holder in holders:
            peer = self._resolve_peer(holder)
            if peer is None:
                continue
            try:
                data, _ = peer.get_block(block_id)
            except (ColdbootError, OSError):
                self.metrics.failed_sources += 1
                continue
            if self._accept(block_id, data, "peer"):
                return data, "peer"
        for tag, source in (("cache", self.cluster_cache), ("registry", self.registry)):
            if source is None:
                continue
            try:
                data = source.get_block(block_id)
            except (ColdbootError, OSError):
                self.metrics.failed_sources += 1
                continue
            if self._accept(block_id, data, tag):
                return data, tag
        raise FetchError(f"all sources exhausted for block {block_id}")

    def _accept(self, block_id, data, tag) -> bool:
        if sha256_hex(data) != block_id:
            self.metrics.corrupt_responses += 1
            log.warning("node %s: digest mismatch for %s from %s", self.node_id, block_id[:12], tag)
            return False
        with self._lock:
            self._blocks[block_id] = data
        self.metrics.by_source[tag] += 1
        self.metrics.bytes_by_source[tag] += len(data)
        self.tracker.announce(block_id, self.node_id)
        return True

    def ensure(self, block_id: BlockId) -> tuple[bytes, bool]:
        """Return block bytes, fetching if needed; second item is True if this call went remote
        or had to wait for an in-flight remote fetch."""
        data = self._blocks.get(block_id)
        if data is not None:
            return data, False
        with self._lock:
            data = self._blocks.get(block_id)
            if data is not None:
                return data, False
            ev = self._inflight.get(block_id)
            owner = ev is None
            if owner:
                ev = self._inflight[block_id] = threading.Event()
        if not owner:
            ev.wait()
            if block_id in self._blocks:
                return self._blocks[block_id], True
            return self.ensure(block_id)
        try:
            data, _ = self.fetch_block(block_id)
        finally:
            with self._lock:
                del self._inflight[block_id]
            ev.set()
        return data, True

    def read(self, path: str, offset: int, length: int) -> bytes:
        return read_file_range(self.manifest, path, offset, length, lambda b: self.ensure(b)[0])


@dataclass
class Fault:
    t: int
    path: str
    block_index: int


class ContainerHandle:
    """A started container: replays accesses and owns the background streamer."""

    def __init__(self, node: Node, policy: Policy, stream_workers: int):
        self.node = node
        self.policy = policy
        self.fell_back = False
        self.faults: list[Fault] = []
        self._stream_workers = stream_workers
        self._streamer: ThreadPoolExecutor | None = None
        self._stream_futures = []
        self._stop = threading.Event()

    def access(self, path: str, offset: int, t: int = 0) -> bytes:
        """Touch one byte offset; records a fault if the block was not local."""
        bs = self.node.manifest.block_size
        index = offset // bs
        block_id = self.node.manifest.block_at(path, index)
        data, remote = self.node.ensure(block_id)
        if remote:
            self.faults.append(Fault(int(t), path, index))
        return data

    def replay(self, access_stream: Iterable[tuple[int, str, int]]) -> list[Fault]:
        start = len(self.faults)
        for t, path, offset in sorted(access_stream, key=lambda a: a[0]):
            self.access(path, offset, t)
        return self.faults[start:]

    def faults_within(self, window: int) -> list[Fault]:
        return [f for f in self.faults if f.t <= window]

    def _start_streaming(self, exclude: set):
        cold = [b for b in self.node.manifest.block_ids() if b not in exclude]
        self._streamer = ThreadPoolExecutor(self._stream_workers, thread_name_prefix="cold-stream")

        def pull(block_id):
            if self._stop.is_set() or self.node.has(block_id):
                return
            self.node.ensure(block_id)

        self._stream_futures = [self._streamer.submit(pull, b) for b in cold]

    def wait_streaming(self, timeout: float | None = None) -> bool:
        """Block until background streaming finishes; re-raises worker errors."""
        if self._streamer is None:
            return True
        done, pending = wait(self._stream_futures, timeout=timeout)
        for f in done:
            f.result()
        return not pending

    @property
    def complete(self) -> bool:
        local = self.node.local_blocks()
        return all(b in local for b in self.node.manifest.block_ids())

    def stop(self):
        self._stop.set()
        if self._streamer is not None:
            self._streamer.shutdown(wait=True)


def start_container(node: Node, hotset: HotSet | None = None,
                    policy: Policy | str = Policy.PREFETCH, *,
                    stream_workers: int = DEFAULT_STREAM_WORKERS,
                    prefetch_workers: int = DEFAULT_STREAM_WORKERS) -> ContainerHandle:
    """Start a container on ``node``.

    ``lazy_only`` returns immediately and fetches on fault.  ``prefetch``
    first pulls every hot block (in parallel), then returns with cold blocks
    streaming in the background.  A missing hot set under ``prefetch`` falls
    back to ``lazy_only`` and sets ``handle.fell_back``.
    """
    policy = Policy(policy)
    if policy is Policy.PREFETCH and hotset is None:
        log.warning("node %s: no hot set for %s, falling back to lazy loading",
                    node.node_id, node.manifest.image_id)
        handle = ContainerHandle(node, Policy.LAZY_ONLY, stream_workers)
        handle.fell_back = True
        return handle
    handle = ContainerHandle(node, policy, stream_workers)
    if policy is Policy.PREFETCH:
        with ThreadPoolExecutor(prefetch_workers, thread_name_prefix="hot-prefetch") as pool:
            for f in [pool.submit(node.ensure, b) for b in hotset.blocks]:
                f.result()
        handle._start_streaming(set(hotset.blocks))
    return handle
