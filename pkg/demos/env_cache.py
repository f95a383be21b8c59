"""
Recording and reusing an environment setup
==========================================

The first job with a given parameter set runs the installer once and
snapshots the resulting file changes.  Every other node, and every later
job with the same parameters, restores the snapshot instead.
"""

import tempfile
from pathlib import Path

from coldboot.envcache import CacheStore, SetupJob, run_setup
from coldboot.stripedstore import StripeConfig, StripedStore

work = Path(tempfile.mkdtemp())
installs = []


def install(root):
    installs.append(root)
    (root / "site-packages/torch").mkdir(parents=True)
    (root / "site-packages/torch/__init__.py").write_text("version = '2.1'\n")
    (root / "bin").mkdir()
    (root / "bin/launch").write_text("#!/bin/sh\nexec python -m trainer\n")
    (root / "bin/launch").chmod(0o755)


def job(name, params):
    roots = {}
    for i in range(4):
        roots[i] = work / name / f"node{i}"
        roots[i].mkdir(parents=True)
    return SetupJob(name, params, install, roots)


# %%
# Snapshots live in the striped store, like checkpoints do.

striped = StripedStore.open(work / "striped", StripeConfig(chunk_size=4096, stripe_size=16384))
cache = CacheStore(striped.mount_view("envcache/"))

params = {"python": "3.10", "pkgs": ["torch==2.1"]}
first = run_setup(job("job-a", params), cache)
print(first.kind, "recorder:", first.recorder, "restored on:", first.restored)

second = run_setup(job("job-b", params), cache)
print(second.kind, "restored on:", second.restored)
print("installer ran", len(installs), "time(s)")

# %%
# Changing any parameter changes the fingerprint, so the cache misses.

third = run_setup(job("job-c", {**params, "pkgs": ["torch==2.2"]}), cache)
print(third.kind, "installer ran", len(installs), "time(s)")
