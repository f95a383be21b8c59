"""Content-addressed block storage for flattened container images.

Layered images are flattened into one file set, every file is cut into
fixed-size blocks, and each block is stored once under its SHA-256 digest.
The last block of a file is zero-padded to ``block_size`` before hashing; the
logical file size lives in the manifest.

On-disk layout under a store root::

    blocks/ab/cd/abcd...ef      # one file per block, two-level fan-out
    manifests/<image_id>.json
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Iterable

from .errors import BuildError, NotFound, RangeError

HASH_NAME = "sha256"
DEFAULT_BLOCK_SIZE = 512 * 1024
MIN_BLOCK_SIZE = 4 * 1024
# flattened image size used by the large-image scenario generator
REFERENCE_IMAGE_BYTES = int(28.62e9)

BlockId = str  # lowercase hex digest


def block_digest(data: bytes) -> BlockId:
    return hashlib.sha256(data).hexdigest()


@dataclass
class Layer:
    path: Path
    tombstones: list[str] = field(default_factory=list)


@dataclass
class LayeredImageSpec:
    """Ordered layers, lowest first.  Tombstones in a layer delete lower paths."""

    image_id: str
    layers: list[Layer]

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "LayeredImageSpec":
        """Load ``{"image_id": ..., "layers": [{"path": dir, "tombstones": [...]}]}``.

        Relative layer paths resolve against the spec file's directory.
        """
        path = Path(path)
        doc = json.loads(path.read_text())
        layers = []
        for item in doc["layers"]:
            p = Path(item["path"])
            if not p.is_absolute():
                p = path.parent / p
            layers.append(Layer(p, list(item.get("tombstones", []))))
        return cls(doc["image_id"], layers)

    def to_json(self) -> str:
        return json.dumps({
            "image_id": self.image_id,
            "layers": [{"path": str(l.path), "tombstones": l.tombstones} for l in self.layers],
        }, indent=2)


@dataclass
class FileEntry:
    path: str
    size: int
    blocks: list[BlockId]


@dataclass
class BlockManifest:
    image_id: str
    block_size: int
    files: list[FileEntry]
    hash: str = HASH_NAME

    def __post_init__(self):
        self._index = {f.path: f for f in self.files}

    @property
    def total_blocks(self) -> int:
        return sum(len(f.blocks) for f in self.files)

    @property
    def unique_blocks(self) -> int:
        return len(self.block_ids())

    def block_ids(self) -> list[BlockId]:
        """Distinct block ids in first-reference order."""
        return list(dict.fromkeys(b for f in self.files for b in f.blocks))

    def file(self, path: str) -> FileEntry:
        try:
            return self._index[path]
        except KeyError:
            raise NotFound(f"no such file in image {self.image_id}: {path}") from None

    def block_at(self, path: str, block_index: int) -> BlockId:
        entry = self.file(path)
        if not 0 <= block_index < len(entry.blocks):
            raise RangeError(f"{path}: block {block_index} out of range")
        return entry.blocks[block_index]

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "hash": self.hash,
            "block_size": self.block_size,
            "total_blocks": self.total_blocks,
            "unique_blocks": self.unique_blocks,
            "files": [{"path": f.path, "size": f.size, "blocks": f.blocks} for f in self.files],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "BlockManifest":
        files = [FileEntry(f["path"], f["size"], list(f["blocks"])) for f in doc["files"]]
        m = cls(doc["image_id"], doc["block_size"], files, doc.get("hash", HASH_NAME))
        if m.total_blocks != doc.get("total_blocks", m.total_blocks):
            raise ValueError("manifest total_blocks disagrees with file entries")
        return m

    @classmethod
    def from_json(cls, text: str) -> "BlockManifest":
        return cls.from_dict(json.loads(text))


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class BlockStore:
    """Blocks on disk keyed by digest.  Safe for concurrent readers; writes are atomic renames."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        (self.root / "blocks").mkdir(parents=True, exist_ok=True)
        (self.root / "manifests").mkdir(parents=True, exist_ok=True)

    def block_path(self, block_id: BlockId) -> Path:
        return self.root / "blocks" / block_id[:2] / block_id[2:4] / block_id

    def has_block(self, block_id: BlockId) -> bool:
        return self.block_path(block_id).is_file()

    def put_block(self, data: bytes) -> tuple[BlockId, bool]:
        """Store ``data``; returns ``(id, newly_written)``."""
        block_id = block_digest(data)
        path = self.block_path(block_id)
        if path.is_file():
            return block_id, False
        _atomic_write(path, data)
        return block_id, True

    def get_block(self, block_id: BlockId) -> bytes:
        try:
            return self.block_path(block_id).read_bytes()
        except (FileNotFoundError, IndexError):
            raise NotFound(f"unknown block {block_id}") from None

    def block_count(self) -> int:
        return sum(1 for p in (self.root / "blocks").glob("*/*/*") if not p.name.startswith("."))

    def save_manifest(self, manifest: BlockManifest) -> Path:
        path = self.root / "manifests" / f"{manifest.image_id}.json"
        _atomic_write(path, manifest.to_json().encode())
        return path

    def load_manifest(self, image_id: str) -> BlockManifest:
        path = self.root / "manifests" / f"{image_id}.json"
        if not path.is_file():
            raise NotFound(f"no manifest for image {image_id}")
        return BlockManifest.from_json(path.read_text())


def _layer_files(layer: Layer) -> dict[str, Path]:
    root = Path(layer.path)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise BuildError(f"unreadable layer directory: {root}")
    out = {}
    errors = []

    def onerror(exc):
        errors.append(exc)

    for dirpath, dirnames, filenames in os.walk(root, onerror=onerror):
        dirnames.sort()
        for name in sorted(filenames):
            full = Path(dirpath) / name
            if full.is_symlink() or not full.is_file():
                continue
            rel = full.relative_to(root).as_posix()
            out["/" + rel] = full
    if errors:
        raise BuildError(f"unreadable path in layer {root}: {errors[0]}")
    return out


def _parents(path: str) -> Iterable[str]:
    p = PurePosixPath(path).parent
    while str(p) != "/":
        yield str(p)
        p = p.parent


def flatten(spec: LayeredImageSpec) -> dict[str, Path]:
    """Merge layers lower to upper; returns absolute image path -> source file."""
    merged: dict[str, Path] = {}
    dirs: dict[str, int] = {}  # directory path -> number of merged files beneath

    def add_dirs(path, delta):
        for d in _parents(path):
            dirs[d] = dirs.get(d, 0) + delta
            if dirs[d] == 0:
                del dirs[d]

    for layer in spec.layers:
        for tomb in layer.tombstones:
            tomb = "/" + tomb.strip("/")
            doomed = [p for p in merged if p == tomb or p.startswith(tomb + "/")]
            for p in doomed:
                del merged[p]
                add_dirs(p, -1)
        for path, src in _layer_files(layer).items():
            if path in dirs:
                raise BuildError(f"path collision: {path} is a directory in a lower layer")
            for d in _parents(path):
                if d in merged:
                    raise BuildError(f"path collision: {d} is a file in a lower layer")
            if path not in merged:
                add_dirs(path, +1)
            merged[path] = src
    return dict(sorted(merged.items()))


def build_image(spec: LayeredImageSpec, store: BlockStore,
                block_size: int = DEFAULT_BLOCK_SIZE) -> BlockManifest:
    """Flatten ``spec``, store its blocks, persist and return the manifest."""
    if block_size < MIN_BLOCK_SIZE or block_size & (block_size - 1):
        raise ValueError(f"block_size must be a power of two >= {MIN_BLOCK_SIZE}, got {block_size}")
    files = []
    for path, src in flatten(spec).items():
        blocks = []
        size = 0
        try:
            with open(src, "rb") as fh:
                while True:
                    chunk = fh.read(block_size)
                    if not chunk:
                        break
                    size += len(chunk)
                    if len(chunk) < block_size:
                        chunk = chunk.ljust(block_size, b"\0")
                    block_id, _ = store.put_block(chunk)
                    blocks.append(block_id)
        except OSError as exc:
            raise BuildError(f"cannot read {src}: {exc}") from exc
        files.append(FileEntry(path, size, blocks))
    manifest = BlockManifest(spec.image_id, block_size, files)
    store.save_manifest(manifest)
    return manifest


def read_file_range(manifest: BlockManifest, path: str, offset: int, length: int,
                    get_block=None, *, store: BlockStore | None = None) -> bytes:
    """Read ``length`` bytes at ``offset`` of ``path`` by assembling blocks.

    ``get_block`` is any callable id -> bytes (a store, a loader node, ...);
    ``store`` is accepted as a convenience.
    """
    if get_block is None:
        if store is None:
            raise TypeError("need get_block or store")
        get_block = store.get_block
    entry = manifest.file(path)
    if offset < 0 or length < 0 or offset + length > entry.size:
        raise RangeError(f"{path}: range [{offset}, {offset + length}) outside size {entry.size}")
    if length == 0:
        return b""
    bs = manifest.block_size
    first, last = offset // bs, (offset + length - 1) // bs
    data = b"".join(get_block(entry.blocks[i]) for i in range(first, last + 1))
    start = offset - first * bs
    return data[start:start + length]
