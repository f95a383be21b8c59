"""Chunk-striped store with parallel reads and writes.

A logical file is cut into ``chunk_size`` chunks.  Chunk ``i`` goes to
replication group ``i % groups`` at within-group position ``i // groups``.
Each group keeps an append-only segment per replica in which chunks from
many files interleave; a chunk's physical byte offset is recorded in the
:class:`ChunkMap`.

Segment record framing (little-endian)::

    b"CBCK" | u16 file_id_len | file_id | u64 chunk_index | u32 length | 32B sha256 | payload
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

from .errors import GetError, NotFound, ProtocolError, PutError, RangeError
from .wire import FrameClient, FrameServer, Kind, from_u64, u64

MiB = 1 << 20
# reference sizes for the checkpoint scenario
REFERENCE_CHECKPOINT_BYTES = int(413e9)
BASELINE_BLOCK_BYTES = 512 * MiB

_MAGIC = b"CBCK"
_HEAD = struct.Struct("<4sH")
_TAIL = struct.Struct("<QI32s")


@dataclass(frozen=True)
class StripeConfig:
    chunk_size: int = 1 * MiB
    stripe_size: int = 4 * MiB
    groups: int = 4
    replicas: int = 1

    def __post_init__(self):
        if self.chunk_size <= 0 or self.groups < 1 or self.replicas < 1:
            raise ValueError(f"invalid stripe config {self}")
        if self.stripe_size < self.chunk_size or self.stripe_size % self.chunk_size:
            raise ValueError("stripe_size must be a positive multiple of chunk_size")

    @property
    def chunks_per_stripe(self) -> int:
        return self.stripe_size // self.chunk_size


def chunk_location(index: int, groups: int) -> tuple[int, int]:
    """Round-robin placement: ``(group, within_group_position)``."""
    return index % groups, index // groups


@dataclass
class ChunkRecord:
    index: int
    group: int
    position: int
    offset: int
    length: int
    digest: str


@dataclass
class ChunkMap:
    file_id: str
    size: int
    chunk_size: int
    groups: int
    chunks: list[ChunkRecord] = field(default_factory=list)

    def chunk_range(self, offset: int, length: int) -> range:
        if length == 0:
            return range(0)
        return range(offset // self.chunk_size, (offset + length - 1) // self.chunk_size + 1)

    def to_json(self) -> str:
        doc = {"file_id": self.file_id, "size": self.size, "chunk_size": self.chunk_size,
               "groups": self.groups, "chunks": [asdict(c) for c in self.chunks]}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str | bytes) -> "ChunkMap":
        doc = json.loads(text)
        return cls(doc["file_id"], doc["size"], doc["chunk_size"], doc["groups"],
                   [ChunkRecord(**c) for c in doc["chunks"]])


class GroupSegment:
    """One replica of one group: an append-only file of framed chunk records."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.touch(exist_ok=True)

    def append(self, file_id: str, index: int, payload: bytes, digest: bytes) -> int:
        fid = file_id.encode()
        frame = _HEAD.pack(_MAGIC, len(fid)) + fid + _TAIL.pack(index, len(payload), digest) + payload
        with open(self.path, "ab") as fh:
            offset = fh.tell()
            fh.write(frame)
        return offset

    def read(self, offset: int) -> tuple[str, int, bytes, bytes]:
        with open(self.path, "rb") as fh:
            fh.seek(offset)
            return self._read_record(fh)

    @staticmethod
    def _read_record(fh) -> tuple[str, int, bytes, bytes]:
        head = fh.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise EOFError
        magic, fid_len = _HEAD.unpack(head)
        if magic != _MAGIC:
            raise ProtocolError("bad segment record magic")
        fid = fh.read(fid_len).decode()
        index, length, digest = _TAIL.unpack(fh.read(_TAIL.size))
        payload = fh.read(length)
        if len(payload) != length:
            raise ProtocolError("truncated segment record")
        return fid, index, payload, digest

    def records(self) -> Iterator[tuple[int, str, int, int]]:
        """Yield ``(offset, file_id, chunk_index, length)`` for every record."""
        with open(self.path, "rb") as fh:
            while True:
                offset = fh.tell()
                try:
                    fid, index, payload, _ = self._read_record(fh)
                except EOFError:
                    return
                yield offset, fid, index, len(payload)


class GroupUnavailable(OSError):
    pass


class LocalBackend:
    """Group segments and chunk maps on a local directory.

    Layout: ``groups/g<k>/r<j>.seg`` and ``maps/<quoted file id>.json``.
    """

    def __init__(self, root: str | os.PathLike, replicas: int = 1):
        self.root = Path(root)
        self.replicas = replicas
        (self.root / "maps").mkdir(parents=True, exist_ok=True)
        self._locks: dict[int, threading.Lock] = {}
        self._meta = threading.Lock()
        self.unavailable: set[int] = set()

    def _segment(self, group: int, replica: int) -> GroupSegment:
        return GroupSegment(self.root / "groups" / f"g{group}" / f"r{replica}.seg")

    def _group_lock(self, group: int) -> threading.Lock:
        with self._meta:
            return self._locks.setdefault(group, threading.Lock())

    def append_chunk(self, group: int, file_id: str, index: int, payload: bytes) -> int:
        if group in self.unavailable:
            raise GroupUnavailable(f"group {group} unavailable")
        digest = hashlib.sha256(payload).digest()
        with self._group_lock(group):
            offsets = {self._segment(group, r).append(file_id, index, payload, digest)
                       for r in range(self.replicas)}
        if len(offsets) != 1:
            raise PutError(f"replicas of group {group} diverged")
        return offsets.pop()

    def read_chunk(self, group: int, offset: int, replica: int = 0) -> bytes:
        if group in self.unavailable:
            raise GroupUnavailable(f"group {group} unavailable")
        try:
            return self._segment(group, replica).read(offset)[2]
        except (EOFError, ProtocolError, struct.error) as exc:
            raise GetError(f"bad record at group {group} offset {offset}: {exc}") from None

    def _map_path(self, file_id: str) -> Path:
        return self.root / "maps" / (file_id.replace("%", "%25").replace("/", "%2F") + ".json")

    def put_map(self, chunk_map: ChunkMap) -> None:
        path = self._map_path(chunk_map.file_id)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        with os.fdopen(fd, "w") as fh:
            fh.write(chunk_map.to_json())
        os.replace(tmp, path)

    def get_map(self, file_id: str) -> ChunkMap:
        path = self._map_path(file_id)
        if not path.is_file():
            raise NotFound(f"no such file: {file_id}")
        return ChunkMap.from_json(path.read_text())

    def list(self, prefix: str = "") -> list[str]:
        names = []
        for p in (self.root / "maps").glob("*.json"):
            name = p.stem.replace("%2F", "/").replace("%25", "%")
            if name.startswith(prefix):
                names.append(name)
        return sorted(names)


class StripedStore:
    """Client-side striping logic over a backend (local directory or remote service)."""

    def __init__(self, backend, cfg: StripeConfig | None = None, retries: int = 2):
        self.backend = backend
        self.cfg = cfg or StripeConfig(replicas=getattr(backend, "replicas", 1))
        self.retries = retries
        self.fetch_log: list[tuple[str, int, int]] = []
        self._log_lock = threading.Lock()

    @classmethod
    def open(cls, root, cfg: StripeConfig | None = None) -> "StripedStore":
        cfg = cfg or StripeConfig()
        return cls(LocalBackend(root, cfg.replicas), cfg)

    # writes ----------------------------------------------------------------------
    def put_file(self, file_id: str, data: bytes | BinaryIO, cfg: StripeConfig | None = None) -> ChunkMap:
        """Stripe ``data`` across groups; the map becomes visible only after every chunk landed."""
        cfg = cfg or self.cfg
        stream = io.BytesIO(data) if isinstance(data, (bytes, bytearray, memoryview)) else data
        records: list[ChunkRecord] = []
        pools = [ThreadPoolExecutor(1, thread_name_prefix=f"group-{g}") for g in range(cfg.groups)]
        pending: list[list] = [[] for _ in range(cfg.groups)]
        futures = []

        def flush(group):
            batch, pending[group] = pending[group], []
            if batch:
                futures.append(pools[group].submit(self._write_batch, group, file_id, batch))

        try:
            size = index = 0
            while True:
                payload = stream.read(cfg.chunk_size)
                if not payload:
                    break
                group, position = chunk_location(index, cfg.groups)
                rec = ChunkRecord(index, group, position, -1, len(payload),
                                  hashlib.sha256(payload).hexdigest())
                records.append(rec)
                pending[group].append((rec, payload))
                if len(pending[group]) >= cfg.chunks_per_stripe:
                    flush(group)
                size += len(payload)
                index += 1
            for g in range(cfg.groups):
                flush(g)
            for f in futures:
                f.result()
        finally:
            for p in pools:
                p.shutdown(wait=True)
        chunk_map = ChunkMap(file_id, size, cfg.chunk_size, cfg.groups, records)
        self.backend.put_map(chunk_map)
        return chunk_map

    def _write_batch(self, group, file_id, batch):
        for rec, payload in batch:
            for attempt in range(self.retries + 1):
                try:
                    rec.offset = self.backend.append_chunk(group, file_id, rec.index, payload)
                    break
                except (OSError, ProtocolError) as exc:
                    if attempt == self.retries:
                        raise PutError(f"group {group} rejected chunk {rec.index} of {file_id}: {exc}") from exc

    # reads -----------------------------------------------------------------------
    def _read_chunk(self, chunk_map: ChunkMap, rec: ChunkRecord) -> bytes:
        with self._log_lock:
            self.fetch_log.append((chunk_map.file_id, rec.index, rec.group))
        last_error = None
        for replica in range(self.cfg.replicas):
            try:
                payload = self.backend.read_chunk(rec.group, rec.offset, replica)
            except (OSError, GetError, ProtocolError, NotFound) as exc:
                last_error = exc
                continue
            if len(payload) == rec.length and hashlib.sha256(payload).hexdigest() == rec.digest:
                return payload
            last_error = "digest mismatch"
        raise GetError(f"{chunk_map.file_id}: chunk {rec.index} unreadable ({last_error})")

    def _iter_chunks(self, chunk_map: ChunkMap, indices: range, width: int) -> Iterator[bytes]:
        if width < 1:
            raise ValueError("parallel_width must be >= 1")
        indices = list(indices)
        if not indices:
            return
        with ThreadPoolExecutor(width, thread_name_prefix="chunk-read") as pool:
            window = []
            it = iter(indices)
            for i in it:
                window.append(pool.submit(self._read_chunk, chunk_map, chunk_map.chunks[i]))
                if len(window) >= width:
                    break
            for i in it:
                yield window.pop(0).result()
                window.append(pool.submit(self._read_chunk, chunk_map, chunk_map.chunks[i]))
            for f in window:
                yield f.result()

    def get_file(self, chunk_map: ChunkMap, parallel_width: int = 8) -> Iterator[bytes]:
        """Yield the file's chunks in order with up to ``parallel_width`` reads in flight."""
        return self._iter_chunks(chunk_map, range(len(chunk_map.chunks)), parallel_width)

    def read_file(self, chunk_map: ChunkMap, parallel_width: int = 8) -> bytes:
        return b"".join(self.get_file(chunk_map, parallel_width))

    def read_range(self, chunk_map: ChunkMap, offset: int, length: int, parallel_width: int = 8) -> bytes:
        if offset < 0 or length < 0 or offset + length > chunk_map.size:
            raise RangeError(f"range [{offset}, {offset + length}) outside {chunk_map.size}")
        indices = chunk_map.chunk_range(offset, length)
        if not indices:
            return b""
        data = b"".join(self._iter_chunks(chunk_map, indices, parallel_width))
        start = offset - indices[0] * chunk_map.chunk_size
        return data[start:start + length]

    def get_map(self, file_id: str) -> ChunkMap:
        return self.backend.get_map(file_id)

    def list(self, prefix: str = "") -> list[str]:
        return self.backend.list(prefix)

    def mount_view(self, prefix: str = "") -> "MountView":
        return MountView(self, prefix)


class MountView:
    """Library-level stand-in for a mounted directory of logical files under ``prefix``."""

    def __init__(self, store: StripedStore, prefix: str = "", parallel_width: int = 8):
        self.store = store
        self.prefix = prefix
        self.parallel_width = parallel_width

    def _full(self, name: str) -> str:
        return self.prefix + name

    def list(self) -> list[str]:
        return [n[len(self.prefix):] for n in self.store.list(self.prefix)]

    def exists(self, name: str) -> bool:
        try:
            self.store.get_map(self._full(name))
            return True
        except NotFound:
            return False

    def write(self, name: str, data) -> ChunkMap:
        return self.store.put_file(self._full(name), data)

    def read(self, name: str, offset: int = 0, length: int | None = None) -> bytes:
        chunk_map = self.store.get_map(self._full(name))
        if length is None:
            length = chunk_map.size - offset
        return self.store.read_range(chunk_map, offset, length, self.parallel_width)

    def open(self, name: str) -> io.BufferedReader:
        return io.BufferedReader(_VirtualFile(self.store, self.store.get_map(self._full(name)),
                                              self.parallel_width), buffer_size=self.store.cfg.chunk_size)


class _VirtualFile(io.RawIOBase):
    def __init__(self, store, chunk_map, width):
        self._store, self._map, self._width = store, chunk_map, width
        self._pos = 0

    def readable(self):
        return True

    def seekable(self):
        return True

    def tell(self):
        return self._pos

    def seek(self, pos, whence=io.SEEK_SET):
        base = {io.SEEK_SET: 0, io.SEEK_CUR: self._pos, io.SEEK_END: self._map.size}[whence]
        self._pos = max(0, base + pos)
        return self._pos

    def readinto(self, buf):
        n = max(0, min(len(buf), self._map.size - self._pos))
        if n == 0:
            return 0
        data = self._store.read_range(self._map, self._pos, n, self._width)
        buf[:n] = data
        self._pos += n
        return n


# remote service ----------------------------------------------------------------

def _store_handler(backend: LocalBackend):
    def handle(kind, fields):
        if kind == Kind.PUT_CHUNK:
            group, file_id, index, payload = fields
            try:
                offset = backend.append_chunk(from_u64(group), file_id.decode(), from_u64(index), payload)
            except GroupUnavailable as exc:
                raise PutError(str(exc)) from None
            return [u64(offset)]
        if kind == Kind.GET_CHUNK:
            group, offset, replica = (from_u64(f) for f in fields)
            try:
                payload = backend.read_chunk(group, offset, replica)
            except GroupUnavailable as exc:
                raise GetError(str(exc)) from None
            return [payload, hashlib.sha256(payload).digest()]
        if kind == Kind.PUT_MAP:
            backend.put_map(ChunkMap.from_json(fields[0]))
            return []
        if kind == Kind.GET_MAP:
            return [backend.get_map(fields[0].decode()).to_json().encode()]
        if kind == Kind.LIST:
            return [n.encode() for n in backend.list(fields[0].decode() if fields else "")]
        raise ProtocolError(f"store does not handle kind {kind:#x}")
    return handle


class StoreServer(FrameServer):
    def __init__(self, backend: LocalBackend, address=("127.0.0.1", 0)):
        self.backend = backend
        super().__init__(address, _store_handler(backend))


class RemoteBackend:
    """Backend speaking PUT_CHUNK/GET_CHUNK/PUT_MAP/GET_MAP/LIST to a :class:`StoreServer`."""

    def __init__(self, endpoint: str, replicas: int = 1):
        self.replicas = replicas
        self._local = threading.local()
        self.endpoint = endpoint

    @property
    def _client(self) -> FrameClient:
        client = getattr(self._local, "client", None)
        if client is None:
            client = self._local.client = FrameClient(self.endpoint)
        return client

    def append_chunk(self, group, file_id, index, payload):
        return from_u64(self._client.call(Kind.PUT_CHUNK, u64(group), file_id.encode(), u64(index), payload)[0])

    def read_chunk(self, group, offset, replica=0):
        return self._client.call(Kind.GET_CHUNK, u64(group), u64(offset), u64(replica))[0]

    def put_map(self, chunk_map):
        self._client.call(Kind.PUT_MAP, chunk_map.to_json().encode())

    def get_map(self, file_id):
        return ChunkMap.from_json(self._client.call(Kind.GET_MAP, file_id.encode())[0])

    def list(self, prefix=""):
        return [f.decode() for f in self._client.call(Kind.LIST, prefix.encode())]


def simulated_read_ms(chunk_map: ChunkMap, parallel_width: int, chunk_service_ms: float) -> float:
    """Virtual time to read every chunk when each group serves one chunk at a time.

    ``parallel_width`` readers take chunks in file order; a chunk occupies its
    group for ``chunk_service_ms``.
    """
    from .clustersim.engine import Resource, Simulator

    sim = Simulator()
    groups = [Resource(sim, capacity=1) for _ in range(chunk_map.groups)]
    queue = list(chunk_map.chunks)

    def reader():
        while queue:
            rec = queue.pop(0)
            yield groups[rec.group].acquire()
            yield sim.timeout(chunk_service_ms)
            groups[rec.group].release()

    for _ in range(parallel_width):
        sim.process(reader())
    sim.run()
    return sim.now
