"""Job-level environment cache.

The first environment setup of a job is bracketed by two scans of the target
directory; the difference (added/modified files and symlinks, plus deleted
paths) is packed into a compressed snapshot keyed by a fingerprint of the
job parameters.  Later runs, restarts and replacement nodes restore the
snapshot instead of running the install.

Snapshot file layout (little-endian)::

    header   8s magic "CBENVSNP" | u16 version | u16 codec | 32s fingerprint
             | u32 entry_count | u32 deleted_count | u64 created_at
    entries  per entry: u16 path_len, path, u8 kind, u32 mode, u64 size,
             u64 mtime_ns, 32s sha256, u16 target_len, target, u64 payload_offset
    deleted  per path: u16 path_len, path
    payload  u64 compressed_len, zlib stream of all file contents in entry order
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import stat
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Callable

from .errors import DiffError, ExpiredCache, NotFound, ScanError, SnapshotFormatError

log = logging.getLogger(__name__)

MAGIC = b"CBENVSNP"
VERSION = 1
CODEC_ZLIB = 1
# compressed snapshot size used by the scenario generator
REFERENCE_SNAPSHOT_BYTES = 270_000_000

FILE, SYMLINK = "file", "symlink"
_KIND_CODE = {FILE: 0, SYMLINK: 1}
_HEADER = struct.Struct("<8sHH32sIIQ")


def job_fingerprint(params: dict) -> str:
    """sha256 over the canonical JSON (sorted keys, compact separators) of ``params``."""
    canon = json.dumps(params, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class EntryInfo:
    kind: str
    size: int
    mtime_ns: int
    digest: str
    mode: int
    target: str = ""

    def same_content(self, other: "EntryInfo") -> bool:
        return (self.kind, self.digest, self.mode) == (other.kind, other.digest, other.mode)


@dataclass
class DirScan:
    root: Path
    entries: dict[str, EntryInfo]

    def content_view(self) -> dict[str, tuple]:
        """Entries without mtimes, for tree equivalence checks."""
        return {p: (e.kind, e.digest, e.mode, e.target) for p, e in self.entries.items()}


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def scan(root: str | os.PathLike) -> DirScan:
    """Inventory every regular file and symlink under ``root`` (symlinks are not followed)."""
    root = Path(root)
    if not root.is_dir():
        raise ScanError([str(root)])
    entries: dict[str, EntryInfo] = {}
    bad: list[str] = []

    def onerror(exc):
        bad.append(getattr(exc, "filename", None) or str(exc))

    for dirpath, dirnames, filenames in os.walk(root, onerror=onerror):
        dirnames.sort()
        names = sorted(filenames) + sorted(d for d in dirnames if os.path.islink(os.path.join(dirpath, d)))
        for name in names:
            full = Path(dirpath) / name
            rel = full.relative_to(root).as_posix()
            try:
                st = os.lstat(full)
                if stat.S_ISLNK(st.st_mode):
                    target = os.readlink(full)
                    entries[rel] = EntryInfo(SYMLINK, len(target), st.st_mtime_ns,
                                             hashlib.sha256(target.encode()).hexdigest(),
                                             stat.S_IMODE(st.st_mode), target)
                elif stat.S_ISREG(st.st_mode):
                    entries[rel] = EntryInfo(FILE, st.st_size, st.st_mtime_ns, _hash_file(full),
                                             stat.S_IMODE(st.st_mode))
            except OSError:
                bad.append(str(full))
    if bad:
        raise ScanError(bad)
    return DirScan(root, dict(sorted(entries.items())))


@dataclass
class SnapshotEntry:
    path: str
    info: EntryInfo
    offset: int  # into the uncompressed payload; unused for symlinks


@dataclass
class EnvSnapshot:
    fingerprint: str
    entries: list[SnapshotEntry]
    deleted: list[str]
    payload: bytes  # compressed
    created_at: int = 0
    _contents: dict | None = field(default=None, repr=False, compare=False)

    @property
    def compressed_size(self) -> int:
        return len(self.payload)

    @property
    def is_empty(self) -> bool:
        return not self.entries and not self.deleted

    def contents(self) -> dict[str, bytes]:
        """Decompressed file contents by relative path (regular files only)."""
        if self._contents is None:
            raw = zlib.decompress(self.payload) if self.payload else b""
            self._contents = {e.path: raw[e.offset:e.offset + e.info.size]
                              for e in self.entries if e.info.kind == FILE}
        return self._contents

    # serialization ---------------------------------------------------------------
    def to_bytes(self) -> bytes:
        fp = bytes.fromhex(self.fingerprint) if self.fingerprint else bytes(32)
        out = [_HEADER.pack(MAGIC, VERSION, CODEC_ZLIB, fp, len(self.entries), len(self.deleted),
                            self.created_at)]
        for e in self.entries:
            path, target = e.path.encode(), e.info.target.encode()
            out.append(struct.pack("<H", len(path)) + path)
            out.append(struct.pack("<BIQQ32s", _KIND_CODE[e.info.kind], e.info.mode, e.info.size,
                                   e.info.mtime_ns, bytes.fromhex(e.info.digest)))
            out.append(struct.pack("<H", len(target)) + target + struct.pack("<Q", e.offset))
        for p in self.deleted:
            b = p.encode()
            out.append(struct.pack("<H", len(b)) + b)
        out.append(struct.pack("<Q", len(self.payload)) + self.payload)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EnvSnapshot":
        try:
            magic, version, codec, fp, n_entries, n_deleted, created = _HEADER.unpack_from(data, 0)
            if magic != MAGIC:
                raise SnapshotFormatError("not an environment snapshot")
            if version != VERSION or codec != CODEC_ZLIB:
                raise SnapshotFormatError(f"unsupported version {version} / codec {codec}")
            pos = _HEADER.size
            kinds = {v: k for k, v in _KIND_CODE.items()}

            def take_str():
                nonlocal pos
                (n,) = struct.unpack_from("<H", data, pos)
                s = data[pos + 2:pos + 2 + n].decode()
                pos += 2 + n
                return s

            entries = []
            for _ in range(n_entries):
                path = take_str()
                kind, mode, size, mtime, digest = struct.unpack_from("<BIQQ32s", data, pos)
                pos += struct.calcsize("<BIQQ32s")
                target = take_str()
                (offset,) = struct.unpack_from("<Q", data, pos)
                pos += 8
                entries.append(SnapshotEntry(path, EntryInfo(kinds[kind], size, mtime, digest.hex(),
                                                             mode, target), offset))
            deleted = [take_str() for _ in range(n_deleted)]
            (plen,) = struct.unpack_from("<Q", data, pos)
            payload = data[pos + 8:pos + 8 + plen]
            if len(payload) != plen:
                raise SnapshotFormatError("truncated payload")
        except (struct.error, KeyError, UnicodeDecodeError) as exc:
            raise SnapshotFormatError(f"corrupt snapshot: {exc}") from exc
        fingerprint = "" if fp == bytes(32) else fp.hex()
        return cls(fingerprint, entries, deleted, payload, created)


def diff(before: DirScan, after: DirScan, fingerprint: str = "", created_at: int | None = None) -> EnvSnapshot:
    """Snapshot of everything new or changed (content, kind or mode) in ``after``, plus deletions.

    File contents are read from ``after.root``, so the tree must still be in
    its post-setup state.
    """
    if Path(before.root).resolve() != Path(after.root).resolve():
        raise DiffError(f"scans of different roots: {before.root} vs {after.root}")
    changed = [p for p, e in after.entries.items()
               if p not in before.entries or not e.same_content(before.entries[p])]
    deleted = sorted(p for p in before.entries if p not in after.entries)
    entries, blobs, offset = [], [], 0
    for p in changed:
        info = after.entries[p]
        if info.kind == FILE:
            data = (Path(after.root) / p).read_bytes()
            if hashlib.sha256(data).hexdigest() != info.digest:
                raise DiffError(f"{p} changed after the scan")
            blobs.append(data)
            entries.append(SnapshotEntry(p, info, offset))
            offset += len(data)
        else:
            entries.append(SnapshotEntry(p, info, offset))
    payload = zlib.compress(b"".join(blobs), 6) if blobs else b""
    created = int(time.time()) if created_at is None else created_at
    return EnvSnapshot(fingerprint, entries, deleted, payload, created)


def _safe_join(root: Path, rel: str) -> Path:
    parts = PurePosixPath(rel).parts
    if PurePosixPath(rel).is_absolute() or ".." in parts or not parts:
        raise SnapshotFormatError(f"unsafe path in snapshot: {rel}")
    return root.joinpath(*parts)


def _remove(path: Path) -> None:
    if path.is_symlink() or path.is_file():
        path.unlink()
    elif path.is_dir():
        shutil.rmtree(path)


def restore(snapshot: EnvSnapshot, root: str | os.PathLike, fingerprint: str | None = None) -> None:
    """Apply ``snapshot`` onto ``root``.  Idempotent.

    Raises :class:`ExpiredCache` when ``fingerprint`` is given and differs
    from the snapshot's.
    """
    if fingerprint is not None and fingerprint != snapshot.fingerprint:
        raise ExpiredCache(f"snapshot {snapshot.fingerprint[:12]} does not match job {fingerprint[:12]}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for rel in snapshot.deleted:
        target = _safe_join(root, rel)
        if target.is_symlink() or target.exists():
            _remove(target)
    contents = snapshot.contents()
    for e in snapshot.entries:
        dest = _safe_join(root, e.path)
        for parent in reversed(dest.relative_to(root).parents[:-1]):
            p = root / parent
            if p.is_symlink() or (p.exists() and not p.is_dir()):
                p.unlink()
        dest.parent.mkdir(parents=True, exist_ok=True)
        if dest.is_symlink() or dest.is_dir() or (e.info.kind == SYMLINK and dest.exists()):
            _remove(dest)
        if e.info.kind == SYMLINK:
            os.symlink(e.info.target, dest)
        else:
            if dest.exists():
                os.chmod(dest, 0o600)
            with open(dest, "wb") as fh:
                fh.write(contents[e.path])
            os.chmod(dest, e.info.mode)
        os.utime(dest, ns=(e.info.mtime_ns, e.info.mtime_ns), follow_symlinks=False)


# job lifecycle -----------------------------------------------------------------

class CacheStore:
    """Snapshots by fingerprint with a single winning writer per fingerprint.

    Backed by a striped-store :class:`~coldboot.stripedstore.MountView` when
    given, else held in memory.  ``claim`` elects the recorder.
    """

    def __init__(self, view=None, prefix: str = "envcache/"):
        self.view = view
        self.prefix = prefix
        self._mem: dict[str, bytes] = {}
        self._claims: dict[str, tuple] = {}
        self._cond = threading.Condition()

    def _name(self, fingerprint):
        return f"{self.prefix}{fingerprint}.cbenv"

    def get(self, fingerprint: str) -> EnvSnapshot | None:
        if self.view is not None:
            try:
                return EnvSnapshot.from_bytes(self.view.read(self._name(fingerprint)))
            except NotFound:
                return None
        data = self._mem.get(fingerprint)
        return EnvSnapshot.from_bytes(data) if data is not None else None

    def put(self, snapshot: EnvSnapshot) -> bool:
        """Store unless a snapshot already exists; returns True if this call won."""
        with self._cond:
            if self.get(snapshot.fingerprint) is not None:
                return False
            data = snapshot.to_bytes()
            if self.view is not None:
                self.view.write(self._name(snapshot.fingerprint), data)
            else:
                self._mem[snapshot.fingerprint] = data
            self._cond.notify_all()
            return True

    def claim(self, fingerprint: str, claimant: tuple) -> bool:
        """First claimant per fingerprint records; claimants are ``(run_id, node_id)``."""
        with self._cond:
            owner = self._claims.setdefault(fingerprint, claimant)
            return owner == claimant

    def release(self, fingerprint: str, claimant: tuple) -> None:
        with self._cond:
            if self._claims.get(fingerprint) == claimant:
                del self._claims[fingerprint]
            self._cond.notify_all()

    def wait_for(self, fingerprint: str, timeout: float) -> EnvSnapshot | None:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                snap = self.get(fingerprint)
                if snap is not None or fingerprint not in self._claims:
                    return snap
                left = deadline - time.monotonic()
                if left <= 0:
                    return None
                self._cond.wait(left)


@dataclass
class SetupJob:
    job_id: str
    params: dict
    install: Callable[[Path], None]
    node_roots: dict[int, Path]

    @property
    def fingerprint(self) -> str:
        return job_fingerprint(self.params)


@dataclass
class SetupOutcome:
    kind: str  # "cached" or "recorded"
    fingerprint: str
    recorder: int | None = None
    installed: list[int] = field(default_factory=list)
    restored: list[int] = field(default_factory=list)
    snapshot_bytes: int = 0
    uploaded: bool = False
    warnings: list[str] = field(default_factory=list)


_run_ids = iter(range(1 << 62))


def run_setup(job: SetupJob, cache_store: CacheStore, wait_timeout: float = 30.0) -> SetupOutcome:
    """Environment setup for every node of ``job``.

    Cache hit: restore on all nodes, skip the install.  Miss: the lowest node
    id installs between two scans, uploads the diff, and the other nodes
    restore it.  If another run already holds the recorder claim for this
    fingerprint, wait for its snapshot.  A failed upload is logged and the
    remaining nodes install directly.
    """
    fp = job.fingerprint
    nodes = sorted(job.node_roots)
    snap = cache_store.get(fp)
    if snap is None:
        recorder = nodes[0]
        claimant = (next(_run_ids), recorder)
        if cache_store.claim(fp, claimant):
            try:
                return _record(job, cache_store, fp, nodes, recorder)
            finally:
                cache_store.release(fp, claimant)
        snap = cache_store.wait_for(fp, wait_timeout)
        if snap is None:
            out = SetupOutcome("recorded", fp, warnings=["recorder did not publish a snapshot"])
            for n in nodes:
                job.install(Path(job.node_roots[n]))
                out.installed.append(n)
            return out
    out = SetupOutcome("cached", fp, snapshot_bytes=snap.compressed_size)
    for n in nodes:
        restore(snap, job.node_roots[n], fp)
        out.restored.append(n)
    return out


def _record(job, cache_store, fp, nodes, recorder) -> SetupOutcome:
    root = Path(job.node_roots[recorder])
    root.mkdir(parents=True, exist_ok=True)
    before = scan(root)
    job.install(root)
    snap = diff(before, scan(root), fp)
    out = SetupOutcome("recorded", fp, recorder=recorder, installed=[recorder],
                       snapshot_bytes=snap.compressed_size)
    try:
        out.uploaded = cache_store.put(snap)
        if not out.uploaded:
            snap = cache_store.get(fp) or snap
    except Exception as exc:  # any backend failure degrades to no-cache
        log.warning("job %s: snapshot upload failed: %s", job.job_id, exc)
        out.warnings.append(f"upload failed: {exc}")
        for n in nodes[1:]:
            job.install(Path(job.node_roots[n]))
            out.installed.append(n)
        return out
    for n in nodes[1:]:
        restore(snap, job.node_roots[n], fp)
        out.restored.append(n)
    return out
