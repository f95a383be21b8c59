"""
Striped checkpoint storage
==========================

A checkpoint is cut into fixed-size chunks dealt round-robin across storage
groups.  Readers pull chunks from all groups at once, so read time falls
with the number of groups until the reader width is the limit.
"""

import tempfile
from pathlib import Path

import numpy as np

from coldboot.stripedstore import StripeConfig, StripedStore, simulated_read_ms

work = Path(tempfile.mkdtemp())
weights = np.random.default_rng(0).standard_normal(200_000).astype(np.float32)

cfg = StripeConfig(chunk_size=64 * 1024, stripe_size=256 * 1024, groups=4)
store = StripedStore.open(work / "ckpt", cfg)
cmap = store.put_file("run7/step1000/model.bin", weights.tobytes())
print(len(cmap.chunks), "chunks;", "groups of the first 8:", [c.group for c in cmap.chunks[:8]])

restored = np.frombuffer(store.read_file(store.get_map("run7/step1000/model.bin"), parallel_width=8),
                         dtype=np.float32)
print("identical:", np.array_equal(restored, weights))

# %%
# A partial read touches only the chunks that cover the range.

store.fetch_log.clear()
head = store.read_range(cmap, 0, 4 * 1000)
print(len(head), "bytes")
print("chunks fetched for 4 kB:", len(store.fetch_log))

# %%
# Simulated read time with one service slot per group and 10 ms per chunk.

for groups in (1, 2, 4, 8):
    layout = StripedStore.open(work / f"g{groups}", StripeConfig(65536, 65536, groups)).put_file(
        "m", weights.tobytes())
    print(groups, "groups:", simulated_read_ms(layout, parallel_width=4, chunk_service_ms=10.0), "ms")
