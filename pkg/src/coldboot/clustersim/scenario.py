"""N-node startup scenarios on the discrete-event kernel.

Each node walks the five-stage pipeline: ResourceQueuing, ResourceAllocation,
then ImageLoading, EnvironmentSetup and ModelInitialization with a barrier
at the start of ImageLoading (gang launch) and at the end of every
GPU-holding stage.  Transfers are fluid flows sharing link bandwidth
max-min fairly; the package source throttles requests that arrive above its
concurrency threshold.

Default constants put the baseline inside the stage ranges observed in
production (image 20-40 s, environment 100-300 s, model init 100-200 s).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from statistics import NormalDist
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..blockstore import DEFAULT_BLOCK_SIZE, REFERENCE_IMAGE_BYTES
from ..envcache import REFERENCE_SNAPSHOT_BYTES
from ..errors import ConfigError
from ..imageloader.trace import DEFAULT_HOT_WINDOW_MS
from ..profiler import Edge, Stage, StageEvent
from ..stripedstore import BASELINE_BLOCK_BYTES, REFERENCE_CHECKPOINT_BYTES
from .engine import Barrier, FlowNetwork, Simulator

IMAGE_POLICIES = ("lazy_only", "prefetch")
ENV_POLICIES = ("install", "cache")
CKPT_POLICIES = ("sequential", "striped")


@dataclass
class Policies:
    image: str = "lazy_only"
    env: str = "install"
    ckpt: str = "sequential"
    stripe_groups: int = 8
    stripe_width: int = 8
    p2p: bool = True

    @classmethod
    def baseline(cls) -> "Policies":
        return cls()

    @classmethod
    def optimized(cls) -> "Policies":
        return cls(image="prefetch", env="cache", ckpt="striped")


@dataclass
class ScenarioConfig:
    """Every knob of a simulated startup.  Sizes in bytes, rates in bytes/s, times in ms."""

    job_id: str = "job0"
    nodes: int = 64
    gpus_per_node: int = 8
    seed: int = 0
    startup_kind: str = "full"  # full | hot_update

    # scheduler phase (delay model only)
    queue_ms: float = 100_000.0
    queue_sigma: float = 0.5
    alloc_ms: float = 3_000.0

    # image loading
    image_bytes: int = REFERENCE_IMAGE_BYTES
    block_size: int = DEFAULT_BLOCK_SIZE
    hot_fraction: float = 0.02
    aux_hot_blocks: int = 40
    container_start_ms: float = 1_000.0
    startup_cpu_ms: float = 2_000.0
    fetch_rtt_ms: float = 70.0
    readahead_blocks: int = 4
    registry_bandwidth: float = 2e9
    registry_threshold: int | None = None
    registry_penalty: float = 1.0
    peer_link_bandwidth: float = 1.25e9
    node_nic_bandwidth: float = 25e9
    cold_cache_bandwidth: float = 10e9
    stream_workers: int = 8
    hot_window_ms: int = DEFAULT_HOT_WINDOW_MS

    # environment setup
    packages: int = 24
    package_bytes: float = 60e6
    package_install_ms: float = 3_500.0
    source_bandwidth: float = 2e9
    source_threshold: int | None = 48
    source_penalty: float = 8.0
    install_timeout_ms: float | None = None
    daemon_ms: float = 40_000.0
    rendezvous_ms_per_node: float = 100.0
    snapshot_bytes: int = REFERENCE_SNAPSHOT_BYTES
    restore_bandwidth: float = 150e6
    fuse_mount_ms: float = 1_500.0

    # model initialization
    init_ms: float = 45_000.0
    checkpoint_bytes: int = REFERENCE_CHECKPOINT_BYTES
    pipeline_stages: int = 2
    storage_groups: int = 32
    storage_group_bandwidth: float = 25e9
    stream_bandwidth: float = 2.5e9
    load_bandwidth: float = 8e9
    baseline_block_bytes: int = BASELINE_BLOCK_BYTES

    # per-node variability
    install_jitter_sigma: float = 0.25
    cpu_jitter_sigma: float = 0.01
    slow_nodes: dict[str, float] = field(default_factory=dict)
    corrupt_peers: list[int] = field(default_factory=list)

    policies: Policies = field(default_factory=Policies)

    # validation / io -------------------------------------------------------------
    def validate(self) -> None:
        p = self.policies
        if self.nodes < 1:
            raise ConfigError("nodes must be >= 1")
        if p.image not in IMAGE_POLICIES or p.env not in ENV_POLICIES or p.ckpt not in CKPT_POLICIES:
            raise ConfigError(f"unknown policy in {p}")
        if p.ckpt == "striped" and (p.stripe_groups < 1 or p.stripe_width < 1):
            raise ConfigError("striped checkpoint needs stripe_groups >= 1 and stripe_width >= 1")
        if p.ckpt == "striped" and p.stripe_groups > self.storage_groups:
            raise ConfigError("stripe_groups exceeds storage_groups")
        if self.startup_kind not in ("full", "hot_update"):
            raise ConfigError(f"unknown startup kind {self.startup_kind}")
        if self.startup_kind == "hot_update" and p.image == "prefetch":
            pass  # image stage is skipped entirely on hot updates
        rates = [self.registry_bandwidth, self.peer_link_bandwidth, self.node_nic_bandwidth,
                 self.cold_cache_bandwidth, self.source_bandwidth, self.restore_bandwidth,
                 self.storage_group_bandwidth, self.stream_bandwidth, self.load_bandwidth]
        if min(rates) <= 0:
            raise ConfigError("all rates must be > 0")
        if self.readahead_blocks < 1 or self.block_size <= 0 or self.hot_fraction < 0 or self.pipeline_stages < 1:
            raise ConfigError("bad image or checkpoint geometry")
        for node in list(self.slow_nodes) + [str(n) for n in self.corrupt_peers]:
            if not 0 <= int(node) < self.nodes:
                raise ConfigError(f"fault target node {node} not in job of {self.nodes} nodes")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        pol = doc.pop("policies", {}) or {}
        pknown = {f.name for f in dataclasses.fields(Policies)}
        if set(pol) - pknown:
            raise ConfigError(f"unknown policy keys: {sorted(set(pol) - pknown)}")
        doc["slow_nodes"] = {str(k): float(v) for k, v in doc.get("slow_nodes", {}).items()}
        return cls(policies=Policies(**pol), **doc)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def with_policies(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, policies=dataclasses.replace(self.policies, **changes))

    @property
    def hot_blocks(self) -> int:
        return max(1, math.ceil(self.image_bytes * self.hot_fraction / self.block_size))


def stratified_lognormal(n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` log-normal factors at the midpoints of ``n`` equal-probability strata, shuffled.

    The sample tail then grows smoothly with ``n`` instead of depending on a
    few extreme draws; the seed decides which node gets which factor.
    """
    if sigma == 0:
        return np.ones(n)
    z = np.array([NormalDist().inv_cdf((k + 0.5) / n) for k in range(n)])
    return np.exp(sigma * z[rng.permutation(n)])


@dataclass
class NodeMetrics:
    faults: int = 0
    registry_fetches: int = 0
    peer_fetches: int = 0
    corrupt_responses: int = 0
    throttled_requests: int = 0
    image_complete_ms: float | None = None


@dataclass
class JobRun:
    job_id: str
    startup_kind: str
    config_digest: str
    seed: int
    events: list[StageEvent]
    node_metrics: dict[int, NodeMetrics]
    failure: dict | None = None
    registry_bytes: float = 0.0
    peer_bytes: float = 0.0

    @property
    def failed(self) -> bool:
        return self.failure is not None

    def log_lines(self, node: int | None = None) -> list[str]:
        evs = self.events if node is None else [e for e in self.events if e.node_id == str(node)]
        return [e.format() for e in sorted(evs, key=StageEvent.sort_key)]

    def manifest(self) -> dict:
        return {"job_id": self.job_id, "config_sha256": self.config_digest, "seed": self.seed,
                "startup_kind": self.startup_kind, "coldboot_version": __version__,
                "numpy_version": np.__version__, "failure": self.failure,
                "nodes": len(self.node_metrics), "events": len(self.events)}

    def write(self, out_dir) -> list[Path]:
        """One ``node-NNNN.log`` per node plus ``run-manifest.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for node in sorted(self.node_metrics):
            p = out / f"node-{node:04d}.log"
            p.write_text("".join(line + "\n" for line in self.log_lines(node)))
            written.append(p)
        p = out / "run-manifest.json"
        p.write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")
        written.append(p)
        return written


class _Run:
    """State for one simulated startup."""

    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.sim = Simulator()
        self.net = FlowNetwork(self.sim)
        self.events: list[StageEvent] = []
        self.failure = None
        n = cfg.nodes
        rng = np.random.default_rng(cfg.seed)
        # per-node random streams drawn up front so node count does not perturb shared draws
        self.node_rng = [np.random.default_rng([cfg.seed, i]) for i in range(n)]
        slow = np.array([cfg.slow_nodes.get(str(i), 1.0) for i in range(n)])
        self.install_factor = stratified_lognormal(n, cfg.install_jitter_sigma, rng) * slow
        self.cpu_factor = np.exp(np.array([r.normal(0.0, cfg.cpu_jitter_sigma) for r in self.node_rng])) * slow
        self.alloc = np.array([r.uniform(0.5, 1.5) for r in self.node_rng]) * cfg.alloc_ms
        self.queue_delay = float(cfg.queue_ms * math.exp(rng.normal(0.0, cfg.queue_sigma)))
        pkg = np.random.default_rng([cfg.seed, 1 << 20])
        self.pkg_bytes = cfg.package_bytes * np.exp(pkg.normal(0.0, 0.8, cfg.packages) - 0.32)
        self.pkg_ms = cfg.package_install_ms * np.exp(pkg.normal(0.0, 0.5, cfg.packages) - 0.125)
        placement = np.random.default_rng([cfg.seed, 1 << 21])
        self.block_group = [placement.permutation(cfg.storage_groups) for _ in range(cfg.pipeline_stages)]

        self.registry = self.net.link("registry", cfg.registry_bandwidth,
                                      cfg.registry_threshold, cfg.registry_penalty)
        self.source = self.net.link("package-source", cfg.source_bandwidth,
                                    cfg.source_threshold, cfg.source_penalty)
        self.cold_cache = self.net.link("cold-cache", cfg.cold_cache_bandwidth)
        self.groups = [self.net.link(f"storage-{g}", cfg.storage_group_bandwidth)
                       for g in range(cfg.storage_groups)]
        self.uplink = [self.net.link(f"up-{i}", cfg.peer_link_bandwidth) for i in range(n)]
        self.downlink = [self.net.link(f"down-{i}", cfg.node_nic_bandwidth) for i in range(n)]

        self.metrics = {i: NodeMetrics() for i in range(n)}
        self.have = [set() for _ in range(n)]
        self.holders: dict[int, list[int]] = {}
        self.corrupt = set(cfg.corrupt_peers)
        self.launch = Barrier(self.sim, n)
        self.stage_barrier = {s: Barrier(self.sim, n) for s in
                              (Stage.ImageLoading, Stage.EnvironmentSetup, Stage.ModelInitialization)}

    # helpers ---------------------------------------------------------------------
    def emit(self, node: int, stage: Stage, edge: Edge) -> None:
        self.events.append(StageEvent(int(round(self.sim.now)), self.cfg.job_id, str(node), stage, edge))

    def fail(self, node: int, stage: Stage, reason: str) -> None:
        if self.failure is None:
            self.failure = {"node": node, "stage": stage.name, "at_ms": int(round(self.sim.now)),
                            "reason": reason}
            self.sim.stop()

    def _move(self, nbytes, links, cap=math.inf):
        return self.net.transfer(nbytes, links, cap)

    # image -----------------------------------------------------------------------
    def fetch_unit(self, i: int, unit: int):
        """One remote request for a readahead unit: a random peer holder first, the registry last."""
        cfg = self.cfg
        m = self.metrics[i]
        nbytes = cfg.block_size * cfg.readahead_blocks
        holders = [h for h in self.holders.get(unit, ()) if h != i] if cfg.policies.p2p else []
        rng = self.node_rng[i]
        while holders:
            h = holders.pop(int(rng.integers(len(holders))))
            yield self.sim.timeout(cfg.fetch_rtt_ms)
            yield self._move(nbytes, [self.uplink[h], self.downlink[i]])
            if h in self.corrupt:
                # digest mismatch: drop the payload and try the next source
                m.corrupt_responses += 1
                continue
            m.peer_fetches += 1
            break
        else:
            yield self.sim.timeout(cfg.fetch_rtt_ms)
            yield self._move(nbytes, [self.registry, self.downlink[i]])
            m.registry_fetches += 1
        self.have[i].add(unit)
        self.holders.setdefault(unit, []).append(i)

    def image_stage(self, i: int):
        cfg = self.cfg
        units = math.ceil(cfg.hot_blocks / cfg.readahead_blocks)
        cpu_gap = cfg.startup_cpu_ms * self.cpu_factor[i] / units
        if cfg.policies.image == "prefetch":
            hot = list(range(units))
            if cfg.policies.ckpt == "striped":
                hot += list(range(units, units + math.ceil(cfg.aux_hot_blocks / cfg.readahead_blocks)))
            # rotate the hot list per node so first requests spread over different units
            shift = (i * len(hot)) // cfg.nodes
            queue = hot[shift:] + hot[:shift]

            def worker():
                while queue:
                    u = queue.pop(0)
                    if u not in self.have[i]:
                        yield from self.fetch_unit(i, u)

            yield self.sim.all_of([self.sim.process(worker()) for _ in range(cfg.stream_workers)])
        yield self.sim.timeout(cfg.container_start_ms * self.cpu_factor[i])
        for u in range(units):
            if u not in self.have[i]:
                self.metrics[i].faults += 1
                yield from self.fetch_unit(i, u)
            yield self.sim.timeout(cpu_gap)

    def cold_stream(self, i: int):
        cfg = self.cfg
        cold = max(cfg.image_bytes - cfg.hot_blocks * cfg.block_size, 0)
        per = cold / cfg.stream_workers
        flows = [self._move(per, [self.cold_cache, self.downlink[i]], cfg.peer_link_bandwidth)
                 for _ in range(cfg.stream_workers)]
        yield self.sim.all_of(flows)
        self.metrics[i].image_complete_ms = self.sim.now

    # environment -----------------------------------------------------------------
    def env_stage(self, i: int):
        cfg = self.cfg
        if cfg.policies.env == "install":
            for k in range(cfg.packages):
                yield self.sim.timeout(cfg.fetch_rtt_ms)
                start = self.sim.now
                flow = yield self._move(self.pkg_bytes[k], [self.source, self.downlink[i]])
                if self.source in flow.throttled:
                    self.metrics[i].throttled_requests += 1
                if cfg.install_timeout_ms is not None and self.sim.now - start > cfg.install_timeout_ms:
                    self.fail(i, Stage.EnvironmentSetup,
                              f"package {k} download exceeded {cfg.install_timeout_ms:.0f} ms")
                    return
                yield self.sim.timeout(self.pkg_ms[k] * self.install_factor[i])
        else:
            g = cfg.policies.stripe_groups if cfg.policies.ckpt == "striped" else 1
            snap_groups = [self.groups[(k * 5 + 3) % cfg.storage_groups] for k in range(g)]
            flows = [self._move(cfg.snapshot_bytes / g, [grp, self.downlink[i]], cfg.stream_bandwidth)
                     for grp in snap_groups]
            yield self.sim.all_of(flows)
            yield self.sim.timeout(cfg.snapshot_bytes / cfg.restore_bandwidth * 1000 * self.cpu_factor[i])
        if cfg.policies.ckpt == "striped":
            yield self.sim.timeout(cfg.fuse_mount_ms * self.cpu_factor[i])
        yield self.sim.timeout(cfg.daemon_ms * self.cpu_factor[i] + cfg.rendezvous_ms_per_node * cfg.nodes)

    # model init ------------------------------------------------------------------
    def init_stage(self, i: int):
        cfg = self.cfg
        yield self.sim.timeout(cfg.init_ms * self.cpu_factor[i])
        stage = i % cfg.pipeline_stages
        shard = cfg.checkpoint_bytes / cfg.pipeline_stages
        load_ms = shard / cfg.load_bandwidth * 1000 * self.cpu_factor[i]
        order = self.block_group[stage]
        if cfg.policies.ckpt == "sequential":
            nblocks = math.ceil(shard / cfg.baseline_block_bytes)
            for j in range(nblocks):
                size = min(cfg.baseline_block_bytes, shard - j * cfg.baseline_block_bytes)
                grp = self.groups[order[j % cfg.storage_groups]]
                yield self._move(size, [grp, self.downlink[i]], cfg.stream_bandwidth)
            yield self.sim.timeout(load_ms)
        else:
            p = cfg.policies
            start = self.sim.now
            flows = [self._move(shard / p.stripe_width,
                                [self.groups[order[k % p.stripe_groups]], self.downlink[i]],
                                cfg.stream_bandwidth)
                     for k in range(p.stripe_width)]
            yield self.sim.all_of(flows)
            # deserialization overlaps the download; only the final chunk's load trails it
            tail = load_ms * (1 << 20) / shard
            yield self.sim.timeout(max(start + load_ms - self.sim.now, 0.0) + tail)

    # pipeline --------------------------------------------------------------------
    def node(self, i: int):
        cfg = self.cfg
        if cfg.startup_kind == "full":
            self.emit(i, Stage.ResourceQueuing, Edge.begin)
            yield self.sim.timeout(self.queue_delay)
            self.emit(i, Stage.ResourceQueuing, Edge.end)
            self.emit(i, Stage.ResourceAllocation, Edge.begin)
            yield self.sim.timeout(self.alloc[i])
            self.emit(i, Stage.ResourceAllocation, Edge.end)
            yield self.launch.arrive()
            self.emit(i, Stage.ImageLoading, Edge.begin)
            yield from self.image_stage(i)
            self.emit(i, Stage.ImageLoading, Edge.end)
            if cfg.policies.image == "prefetch":
                self.sim.process(self.cold_stream(i))
            yield self.stage_barrier[Stage.ImageLoading].arrive()
        self.emit(i, Stage.EnvironmentSetup, Edge.begin)
        yield from self.env_stage(i)
        if self.failure is not None:
            return
        self.emit(i, Stage.EnvironmentSetup, Edge.end)
        yield self.stage_barrier[Stage.EnvironmentSetup].arrive()
        self.emit(i, Stage.ModelInitialization, Edge.begin)
        yield from self.init_stage(i)
        self.emit(i, Stage.ModelInitialization, Edge.end)
        yield self.stage_barrier[Stage.ModelInitialization].arrive()

    def run(self) -> JobRun:
        for i in range(self.cfg.nodes):
            self.sim.process(self.node(i))
        self.sim.run()
        run = JobRun(self.cfg.job_id, self.cfg.startup_kind, self.cfg.digest(), self.cfg.seed,
                     sorted(self.events, key=StageEvent.sort_key), self.metrics, self.failure)
        run.registry_bytes = self.registry.bytes_delivered
        run.peer_bytes = sum(l.bytes_delivered for l in self.uplink)
        return run


def run_scenario(cfg: ScenarioConfig, out_dir=None) -> JobRun:
    """Simulate one startup of ``cfg``; optionally write per-node logs and a run manifest."""
    run = _Run(cfg).run()
    if out_dir is not None:
        run.write(out_dir)
    return run


def inject_fault(cfg: ScenarioConfig, fault: dict) -> ScenarioConfig:
    """Return a copy of ``cfg`` reproducing one pathology.

    ``fault`` is one of ``{"kind": "slow_node", "node": i, "factor": f}``,
    ``{"kind": "corrupt_peer", "node": i}`` or
    ``{"kind": "source_throttle", "threshold": n, "penalty": p, "timeout_ms": t}``.
    """
    kind = fault.get("kind")
    if kind in ("slow_node", "corrupt_peer"):
        node = int(fault["node"])
        if not 0 <= node < cfg.nodes:
            raise ConfigError(f"fault target node {node} not in job of {cfg.nodes} nodes")
        if kind == "slow_node":
            slow = dict(cfg.slow_nodes)
            slow[str(node)] = float(fault.get("factor", 4.0))
            return dataclasses.replace(cfg, slow_nodes=slow)
        return dataclasses.replace(cfg, corrupt_peers=sorted(set(cfg.corrupt_peers) | {node}))
    if kind == "source_throttle":
        return dataclasses.replace(
            cfg,
            source_threshold=int(fault.get("threshold", 16)),
            source_penalty=float(fault.get("penalty", 8.0)),
            install_timeout_ms=fault.get("timeout_ms", 30_000.0),
        )
    raise ConfigError(f"unknown fault kind {kind!r}")


def parse_fault(spec: str) -> dict:
    """``slow_node:7:4.0``, ``corrupt_peer:3`` or ``source_throttle[:threshold[:penalty[:timeout_ms]]]``."""
    parts = spec.split(":")
    kind = parts[0]
    try:
        if kind == "slow_node":
            return {"kind": kind, "node": int(parts[1]), "factor": float(parts[2]) if len(parts) > 2 else 4.0}
        if kind == "corrupt_peer":
            return {"kind": kind, "node": int(parts[1])}
        if kind == "source_throttle":
            out = {"kind": kind}
            for key, conv, raw in zip(("threshold", "penalty", "timeout_ms"), (int, float, float), parts[1:]):
                out[key] = conv(raw)
            return out
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"bad fault spec {spec!r}: {exc}") from None
    raise ConfigError(f"unknown fault kind {kind!r}")
