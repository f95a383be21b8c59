"""A synthetic week of cluster activity built from simulated startups.

Jobs of mixed scale each run one full startup followed by zero or more hot
updates.  Training time between startups is scaled so that GPU-holding
startup time is a chosen share of all server-hours.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from ..errors import ConfigError
from ..profiler import GPU_STAGES, JobRecord, compute_durations
from .scenario import ScenarioConfig, run_scenario

WEEK_MS = 7 * 24 * 3600 * 1000
DEFAULT_STARTUP_SHARE = 0.035
NODE_CHOICES = (1, 2, 4, 8, 16, 32)
NODE_WEIGHTS = (0.25, 0.2, 0.2, 0.15, 0.12, 0.08)


def _shift(events, offset: int):
    return [dataclasses.replace(e, ts=e.ts + offset) for e in events]


def _startup_node_ms(events) -> int:
    """Server-milliseconds held by one startup: per node, stage begin to job-level stage end."""
    d = compute_durations(events)
    total = 0
    for (job, idx, _), ns in d.nodes.items():
        span = d.jobs[(job, idx)].stage_span
        total += sum(span[s][1] - ns.intervals[s][0] for s in GPU_STAGES if s in ns.intervals)
    return total


def synthetic_week(seed: int = 0, jobs: int = 24, startup_share: float = DEFAULT_STARTUP_SHARE,
                   base: ScenarioConfig | None = None) -> list[JobRecord]:
    """Jobs with stage logs and per-node training spans; startup holds ``startup_share`` of server time."""
    if not 0 < startup_share < 1:
        raise ConfigError("startup_share must be in (0, 1)")
    base = base or ScenarioConfig()
    rng = np.random.default_rng(seed)
    plans = []
    for j in range(jobs):
        nodes = int(rng.choice(NODE_CHOICES, p=NODE_WEIGHTS))
        kinds = ["full"] + ["hot_update"] * int(rng.integers(0, 3))
        runs = []
        for k, kind in enumerate(kinds):
            cfg = dataclasses.replace(base, job_id=f"job{j:03d}", nodes=nodes, startup_kind=kind,
                                      seed=seed * 1000 + j * 10 + k, slow_nodes={}, corrupt_peers=[])
            run = run_scenario(cfg)
            runs.append(run.events)
        weights = rng.uniform(0.5, 1.5, len(kinds))
        plans.append((nodes, runs, weights))

    startup_ms = sum(_startup_node_ms(ev) for _, runs, _ in plans for ev in runs)
    weighted = sum(nodes * w.sum() for nodes, _, w in plans)
    # training server-ms needed for the target share, spread by per-segment weight
    train_target = startup_ms * (1 - startup_share) / startup_share
    unit = train_target / weighted

    records = []
    for j, (nodes, runs, weights) in enumerate(plans):
        offset = int(rng.integers(0, WEEK_MS // 4))
        events, spans = [], {str(i): [] for i in range(nodes)}
        for k, ev in enumerate(runs):
            shifted = _shift(ev, offset)
            events.extend(shifted)
            begin = max(e.ts for e in shifted)
            length = int(round(weights[k] * unit))
            for i in range(nodes):
                spans[str(i)].append((begin, begin + length))
            offset = begin + length + 1
        records.append(JobRecord(f"job{j:03d}", base.gpus_per_node, events, spans))
    return records
