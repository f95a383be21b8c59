"""First-run access traces and the hot block sets derived from them."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from ..blockstore import BlockId, BlockManifest
from ..errors import NotFound, TraceError

# recording window for hot blocks, milliseconds since container start
DEFAULT_HOT_WINDOW_MS = 120_000


@dataclass(frozen=True)
class AccessEvent:
    t: int
    path: str
    block_index: int


@dataclass
class AccessTrace:
    image_id: str
    events: list[AccessEvent] = field(default_factory=list)

    def to_jsonl(self) -> str:
        buf = io.StringIO()
        write_trace(self, buf)
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, text: str, image_id: str | None = None) -> "AccessTrace":
        return read_trace(io.StringIO(text), image_id)


@dataclass
class HotSet:
    image_id: str
    window: int
    blocks: list[BlockId]

    def __contains__(self, block_id):
        return block_id in set(self.blocks)

    def to_dict(self):
        return {"image_id": self.image_id, "window": self.window, "blocks": self.blocks}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["image_id"], doc["window"], list(doc["blocks"]))


def record_trace(manifest: BlockManifest, access_stream: Iterable[tuple[int, str, int]]) -> AccessTrace:
    """Map raw ``(t, path, byte_offset)`` accesses to block-granular events.

    Accesses are ordered by time (stable), mapped to ``offset // block_size``
    and consecutive repeats of the same block are collapsed.  Later
    re-accesses are kept.
    """
    bs = manifest.block_size
    events: list[AccessEvent] = []
    for t, path, offset in sorted(access_stream, key=lambda a: a[0]):
        try:
            entry = manifest.file(path)
        except NotFound:
            raise TraceError(f"access to unknown path {path}") from None
        if not 0 <= offset < max(entry.size, 1) or entry.size == 0:
            raise TraceError(f"{path}: offset {offset} outside file of size {entry.size}")
        ev = AccessEvent(int(t), path, offset // bs)
        if events and events[-1].path == ev.path and events[-1].block_index == ev.block_index:
            continue
        events.append(ev)
    return AccessTrace(manifest.image_id, events)


def derive_hotset(trace: AccessTrace, window: int, manifest: BlockManifest) -> HotSet:
    """Blocks whose *first* access happens at ``t <= window``, in first-access order."""
    if window <= 0:
        raise ValueError("window must be positive")
    first_seen: dict[BlockId, int] = {}
    for ev in trace.events:
        block_id = manifest.block_at(ev.path, ev.block_index)
        first_seen.setdefault(block_id, ev.t)
    hot = [b for b, t in first_seen.items() if t <= window]
    return HotSet(trace.image_id, window, hot)


def write_trace(trace: AccessTrace, fp: TextIO) -> None:
    for ev in trace.events:
        fp.write(json.dumps({"image_id": trace.image_id, "t": ev.t, "path": ev.path,
                             "block_index": ev.block_index}) + "\n")


def read_trace(fp: TextIO, image_id: str | None = None) -> AccessTrace:
    events = []
    for line in fp:
        line = line.strip()
        if not line:
            continue
        doc = json.loads(line)
        if image_id is None:
            image_id = doc.get("image_id")
        events.append(AccessEvent(int(doc["t"]), doc["path"], int(doc["block_index"])))
    if image_id is None:
        raise TraceError("trace has no image_id")
    return AccessTrace(image_id, events)


def upload_trace(tracker, trace: AccessTrace) -> None:
    """Publish ``trace`` for its image; the last upload wins."""
    tracker.put_trace(trace.image_id, trace.to_jsonl().encode())


def download_trace(tracker, image_id: str) -> AccessTrace:
    return AccessTrace.from_jsonl(tracker.get_trace(image_id).decode(), image_id)
