"""
Block-level images and hot-set prefetch
=======================================

Build a two-layer image into a content-addressed block store, record which
blocks a container touches while it starts, and prefetch exactly those
blocks on the next node.
"""

import random
import tempfile
from pathlib import Path

from coldboot.blockstore import BlockStore, Layer, LayeredImageSpec, build_image
from coldboot.imageloader import Node, Policy, Tracker, derive_hotset, record_trace, start_container

work = Path(tempfile.mkdtemp())
rng = random.Random(0)

# %%
# Two layers: a base with a runtime, and an app layer that deletes a config
# file from the base.  Identical blocks are stored once.

base = work / "base"
(base / "usr/lib").mkdir(parents=True)
(base / "etc").mkdir()
runtime = rng.randbytes(64 * 4096)
(base / "usr/lib/runtime.so").write_bytes(runtime)
(base / "usr/lib/runtime-copy.so").write_bytes(runtime)
(base / "etc/old.conf").write_text("legacy\n")

app = work / "app"
(app / "srv").mkdir(parents=True)
(app / "srv/train.py").write_bytes(rng.randbytes(5 * 4096 + 99))

store = BlockStore(work / "registry")
spec = LayeredImageSpec("trainer:v1", [Layer(base), Layer(app, ["etc/old.conf"])])
manifest = build_image(spec, store, block_size=4096)
print([f.path for f in manifest.files])
print("blocks:", manifest.total_blocks, "unique:", manifest.unique_blocks)

# %%
# A startup touches the entry point and a few runtime pages early, then more
# of the runtime much later.

accesses = [(0, "/srv/train.py", 0), (40, "/srv/train.py", 4096),
            (900, "/usr/lib/runtime.so", 0), (1500, "/usr/lib/runtime.so", 8 * 4096),
            (400_000, "/usr/lib/runtime.so", 60 * 4096)]
trace = record_trace(manifest, accesses)
hot = derive_hotset(trace, window_ms := 120_000, manifest)
print(len(hot.blocks), "hot blocks out of", manifest.unique_blocks)

# %%
# With the hot set fetched before the container starts, nothing in the
# window faults.  A lazy container faults on every first touch.

node = Node("node-1", manifest, Tracker(), store)
handle = start_container(node, hot, Policy.PREFETCH)
print("prefetch faults in window:", len(handle.replay(a for a in accesses if a[0] <= window_ms)))
handle.stop()

lazy = start_container(Node("node-2", manifest, Tracker(), store), None, Policy.LAZY_ONLY)
print("lazy faults in window:", len(lazy.replay(a for a in accesses if a[0] <= window_ms)))
