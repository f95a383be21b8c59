"""Acceptance criteria, one PASS/FAIL line each (shown in the terminal summary).

Run alone with ``pytest tests/test_acceptance.py -s``.
"""
import dataclasses
import random
import time

import pytest

from coldboot.blockstore import BlockStore, build_image
from coldboot.clustersim import ScenarioConfig, run_scenario
from coldboot.clustersim.ablation import run_ablation, run_metrics, straggler_sweep
from coldboot.imageloader import Node, Policy, Tracker, derive_hotset, record_trace, start_container
from coldboot.clustersim.workload import synthetic_week
from coldboot.profiler import (JobRecord, Stage, analyze, cluster_report, compute_durations, parse_log,
                               straggler_stats, write_analysis, write_report)
from coldboot.stripedstore import StripedStore, StripeConfig, chunk_location
from oracles import (SINGLE_JOB_T0, SINGLE_JOB_TRAINING_S, blockstore_roundtrip, envcache_roundtrip,
                     random_image, round_robin_oracle, single_job_lines, striped_roundtrip)

pytestmark = pytest.mark.slow

CASES = 1000
BUDGET_S = 120.0


def test_roundtrip_suites(tmp_path, acceptance_line):
    total = 0.0
    all_ok = True
    for name, fn in (("blockstore", blockstore_roundtrip), ("envcache", envcache_roundtrip),
                     ("stripedstore", striped_roundtrip)):
        t0 = time.perf_counter()
        n, mismatches = fn(CASES, seed=2024, tmp=tmp_path / name)
        elapsed = time.perf_counter() - t0
        total += elapsed
        ok = n >= CASES and not mismatches
        all_ok &= ok
        acceptance_line(f"1 roundtrip/{name}", ok, f"{n} cases, {len(mismatches)} mismatches, {elapsed:.1f} s")
    acceptance_line("1 roundtrip total runtime < 2 min", total < BUDGET_S, f"{total:.1f} s")
    assert all_ok and total < BUDGET_S


def test_stripe_mapping_matches_oracle(tmp_path, acceptance_line):
    bad = []
    for groups in (1, 2, 3, 4, 8):
        want = round_robin_oracle(10_000, groups)
        bad += [(i, groups) for i in range(10_000) if chunk_location(i, groups) != want[i]]
        store = StripedStore.open(tmp_path / f"g{groups}", StripeConfig(chunk_size=1, stripe_size=1, groups=groups))
        cmap = store.put_file("x", bytes(10_000))
        bad += [(c.index, groups) for c in cmap.chunks if (c.group, c.position) != want[c.index]]
    acceptance_line("2 stripe mapping", not bad, f"{len(bad)} mismatches over i<10000, G in {{1,2,3,4,8}}")
    assert not bad


def test_prefetch_sufficiency(tmp_path, acceptance_line):
    rng = random.Random(77)
    window = 120_000
    images = 0
    failures = []
    for k in range(24):
        spec, contents = random_image(rng, tmp_path / f"img{k}", f"img{k}", max_size=60_000)
        files = {p: d for p, d in contents.items() if d}
        if not files:
            continue
        images += 1
        store = BlockStore(tmp_path / "registry")
        m = build_image(spec, store, block_size=4096)
        paths = sorted(files)
        stream = [(rng.randint(0, 2 * window), p, rng.randrange(len(files[p])))
                  for p in rng.choices(paths, k=rng.randint(1, 40))]
        hot = derive_hotset(record_trace(m, stream), window, m)
        # independent expectation: every block touched inside the window
        needed = {m.block_at(p, off // 4096) for t, p, off in stream if t <= window}
        node = Node("n", m, Tracker(), store)
        handle = start_container(node, hot, Policy.PREFETCH, stream_workers=1)
        missing = [b for b in needed if not node.has(b)]
        faults = handle.replay([a for a in stream if a[0] <= window])
        handle.stop()
        if missing or faults:
            failures.append((k, len(missing), len(faults)))
    ok = images >= 20 and not failures
    acceptance_line("3 prefetch sufficiency", ok, f"{images} images, {len(failures)} with in-window faults")
    assert ok, failures


def test_straggler_reproduction(acceptance_line):
    base = ScenarioConfig()
    sweep = straggler_sweep(base, node_counts=(8, 16, 32, 64), seeds=(0, 1, 2))
    counts = sorted(sweep)
    monotone = all(sweep[a] <= sweep[b] for a, b in zip(counts, counts[1:]))
    cache = base.with_policies(env="cache")
    cached = max(run_metrics(run_scenario(dataclasses.replace(cache, nodes=64, seed=s)))["env_max_median"]
                 for s in (0, 1, 2))
    shown = ", ".join(f"{n}:{sweep[n]:.3f}" for n in counts)
    acceptance_line("4a baseline env Max/Median at 64 nodes >= 1.3", sweep[64] >= 1.3, f"{sweep[64]:.3f}")
    acceptance_line("4b ratio nondecreasing in node count", monotone, shown)
    acceptance_line("4c env cache ratio < 1.05", cached < 1.05, f"worst over seeds {cached:.3f}")
    assert sweep[64] >= 1.3 and monotone and cached < 1.05


def test_ablation(acceptance_line):
    table = run_ablation(ScenarioConfig(), scales_gpus=(16, 32, 48, 64, 128), reps=3)
    base = table.row("baseline", 128).mean
    opt = table.row("optimized", 128).mean
    ratio = opt["e2e_s"] / base["e2e_s"]
    image = table.improvement("optimized", 128, "image_s")
    env = table.improvement("optimized", 128, "env_s")
    init = table.improvement("optimized", 128, "init_s")
    e2e = f"{opt['e2e_s']:.1f} / {base['e2e_s']:.1f} s = {ratio:.3f}"
    checks = [("5a end-to-end <= 0.55x baseline", ratio <= 0.55, e2e),
              ("5b image improvement in [3, 12]", 3 <= image <= 12, f"{image:.2f}x"),
              ("5c env improvement >= 1.7x", env >= 1.7, f"{env:.2f}x"),
              ("5d init improvement >= 1.3x", init >= 1.3, f"{init:.2f}x")]
    for name, ok, detail in checks:
        acceptance_line(name + " at 128 GPUs", ok, detail)
    assert all(ok for _, ok, _ in checks)


def test_profiler_fixture(acceptance_line):
    events, _ = parse_log(single_job_lines())
    d = compute_durations(events)
    s = 1000
    want = {"n0": 60, "n1": 60, "n2": 92}
    exact = all(d.node("fixture", n).durations == {
        Stage.ResourceQueuing: 10 * s, Stage.ResourceAllocation: 2 * s, Stage.ImageLoading: 30 * s,
        Stage.EnvironmentSetup: e * s, Stage.ModelInitialization: 40 * s} for n, e in want.items())
    [env] = straggler_stats(d, Stage.EnvironmentSetup)
    end = SINGLE_JOB_T0 + 174 * s
    rec = JobRecord("fixture", 8, events, {n: [(end, end + SINGLE_JOB_TRAINING_S * s)] for n in want})
    share = cluster_report([rec]).startup_share
    acceptance_line("6a hand-computed durations", exact, "all 15 node-stage durations exact")
    acceptance_line("6b {60,60,92} ratio", env.max_median_ratio == 92 / 60, f"{env.max_median_ratio!r}")
    acceptance_line("6c single-job startup share", f"{share:.2%}" == "3.33%", f"{share:.4%}")
    assert exact and env.max_median_ratio == 92 / 60 and f"{share:.2%}" == "3.33%"


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(tmp_path, acceptance_line):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        cfg = ScenarioConfig(nodes=16, seed=11)
        run = run_scenario(cfg, out / "logs")
        write_analysis(analyze(run.log_lines()), out / "analysis")
        write_report(cluster_report(synthetic_week(seed=11, jobs=3)), out / "report")
        run_ablation(ScenarioConfig(seed=11), scales_gpus=(16, 32), reps=2).write(out / "ablation")
        outs.append(_tree_bytes(out))
    same = outs[0] == outs[1] and len(outs[0]) > 0
    acceptance_line("7 determinism", same, f"{len(outs[0])} files byte-identical across two runs")
    assert same
