"""``coldboot`` command line.

Exit codes: 0 success, 1 operation error, 2 usage error.  Commands that
touch persistent state take ``--store`` or fall back to ``$COLDBOOT_STORE``.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

from . import __version__
from .blockstore import DEFAULT_BLOCK_SIZE, BlockStore, LayeredImageSpec, build_image
from .envcache import CacheStore, EnvSnapshot, diff, job_fingerprint, restore, scan
from .errors import ColdbootError
from .imageloader import DEFAULT_HOT_WINDOW_MS, derive_hotset, read_trace, record_trace, write_trace
from .profiler import (JobRecord, analysis_to_dict, analyze, cluster_report, parse_log, read_logs,
                       report_to_dict, write_analysis, write_report)
from .stripedstore import ChunkMap, StripeConfig, StripedStore

STORE_ENV = "COLDBOOT_STORE"


class UsageError(Exception):
    pass


def _store_root(args) -> Path:
    root = args.store or os.environ.get(STORE_ENV)
    if not root:
        raise UsageError(f"no store: pass --store or set {STORE_ENV}")
    return Path(root)


def _block_store(args) -> BlockStore:
    return BlockStore(_store_root(args) / "images")


def _striped(args, cfg: StripeConfig | None = None) -> StripedStore:
    return StripedStore.open(_store_root(args) / "striped", cfg)


def _emit(text: str, out: str | None) -> None:
    if out and out != "-":
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None


# image ---------------------------------------------------------------------------

def cmd_image_build(args):
    spec = LayeredImageSpec.from_json(args.spec)
    manifest = build_image(spec, _block_store(args), block_size=args.block_size)
    _emit(manifest.to_json() + "\n", args.output)


def cmd_image_trace(args):
    manifest = _block_store(args).load_manifest(args.image)
    stream = []
    with open(args.accesses) as fp:
        for n, line in enumerate(fp, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                path = doc["path"] if doc["path"].startswith("/") else "/" + doc["path"]
                stream.append((int(doc["t"]), path, int(doc.get("offset", 0))))
            except (ValueError, KeyError) as exc:
                raise UsageError(f"{args.accesses}:{n}: bad access record: {exc}") from None
    trace = record_trace(manifest, stream)
    if args.output and args.output != "-":
        with open(args.output, "w") as fp:
            write_trace(trace, fp)
    else:
        write_trace(trace, sys.stdout)


def cmd_image_hotset(args):
    with open(args.trace) as fp:
        trace = read_trace(fp)
    manifest = _block_store(args).load_manifest(trace.image_id)
    hot = derive_hotset(trace, args.window, manifest)
    _emit(json.dumps(hot.to_dict(), indent=1) + "\n", args.output)


# env -----------------------------------------------------------------------------

def _cache(args) -> CacheStore:
    return CacheStore(_striped(args).mount_view())


def cmd_env_snapshot(args):
    params = _load_json(args.params)
    fp = job_fingerprint(params)
    root = Path(args.root)
    before = scan(root)
    proc = subprocess.run(args.command, shell=True, cwd=root)
    if proc.returncode != 0:
        raise ColdbootError(f"setup command exited with {proc.returncode}")
    snap = diff(before, scan(root), fingerprint=fp)
    if args.output:
        Path(args.output).write_bytes(snap.to_bytes())
    stored = _cache(args).put(snap) if (args.store or os.environ.get(STORE_ENV)) else False
    print(json.dumps({"fingerprint": fp, "entries": len(snap.entries), "deleted": len(snap.deleted),
                      "compressed_bytes": snap.compressed_size, "stored": stored}))


def cmd_env_restore(args):
    params = _load_json(args.params)
    fp = job_fingerprint(params)
    if args.snapshot:
        snap = EnvSnapshot.from_bytes(Path(args.snapshot).read_bytes())
    else:
        snap = _cache(args).get(fp)
        if snap is None:
            raise ColdbootError(f"no cached environment for fingerprint {fp}")
    restore(snap, args.root, fingerprint=fp)
    print(json.dumps({"fingerprint": fp, "restored": len(snap.entries), "deleted": len(snap.deleted)}))


# ckpt ----------------------------------------------------------------------------

def cmd_ckpt_put(args):
    cfg = StripeConfig(chunk_size=args.chunk_size, stripe_size=args.stripe_size, groups=args.groups)
    store = _striped(args, cfg)
    file_id = args.id or Path(args.file).name
    with open(args.file, "rb") as fp:
        cmap = store.put_file(file_id, fp, cfg)
    _emit(cmap.to_json() + "\n", args.map)


def cmd_ckpt_get(args):
    cmap = ChunkMap.from_json(Path(args.map).read_bytes())
    store = _striped(args)
    if args.output and args.output != "-":
        with open(args.output, "wb") as fp:
            for piece in store.get_file(cmap, parallel_width=args.width):
                fp.write(piece)
    else:
        out = sys.stdout.buffer
        for piece in store.get_file(cmap, parallel_width=args.width):
            out.write(piece)
        out.flush()


# sim -----------------------------------------------------------------------------

def _scenario(args):
    from .clustersim import Policies, ScenarioConfig
    cfg = ScenarioConfig.load(args.scenario) if args.scenario else ScenarioConfig()
    if args.nodes is not None:
        cfg.nodes = args.nodes
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "policy", None) == "optimized":
        cfg.policies = Policies.optimized()
    elif getattr(args, "policy", None) == "baseline":
        cfg.policies = Policies.baseline()
    cfg.validate()
    return cfg


def _sim_summary(run):
    from .clustersim.ablation import run_metrics
    doc = run.manifest()
    if not run.failed:
        doc["metrics"] = run_metrics(run)
    return json.dumps(doc, indent=1, sort_keys=True)


def cmd_sim_run(args):
    from .clustersim import run_scenario
    run = run_scenario(_scenario(args), args.out)
    print(_sim_summary(run))


def cmd_sim_inject(args):
    from .clustersim import inject_fault, parse_fault, run_scenario
    cfg = _scenario(args)
    for spec in args.fault:
        cfg = inject_fault(cfg, parse_fault(spec))
    run = run_scenario(cfg, args.out)
    print(_sim_summary(run))
    if run.failed:
        return 1


def cmd_sim_ablate(args):
    from .clustersim.ablation import DEFAULT_SCALES_GPUS, default_cells, load_grid, run_ablation
    cfg = _scenario(args)
    cells, scales = load_grid(args.grid) if args.grid else (default_cells(), list(DEFAULT_SCALES_GPUS))
    if args.scales:
        scales = [int(x) for x in args.scales.split(",")]
    table = run_ablation(cfg, cells, scales, reps=args.reps)
    if args.out:
        table.write(args.out)
    sys.stdout.write(table.to_csv())


# profile -------------------------------------------------------------------------

def cmd_profile_parse(args):
    events, report = parse_log(read_logs(args.logs))
    if args.output:
        _emit("".join(e.format() + "\n" for e in events), args.output)
    print(json.dumps({"lines": report.lines, "events": len(events), "malformed": report.malformed_count},
                     sort_keys=True))
    if args.strict and report.malformed_count:
        return 1


def cmd_profile_analyze(args):
    a = analyze(read_logs(args.logs))
    if args.out:
        write_analysis(a, args.out)
    print(json.dumps(analysis_to_dict(a), indent=1, sort_keys=True))


def cmd_profile_report(args):
    if args.synthetic_week:
        from .clustersim.workload import synthetic_week
        jobs = synthetic_week(seed=args.seed or 0, jobs=args.jobs)
    elif args.jobs_file:
        jobs = [JobRecord.from_dict(d) for d in _load_json(args.jobs_file)]
    else:
        raise UsageError("give a jobs file or --synthetic-week")
    report = cluster_report(jobs)
    if args.out:
        write_report(report, args.out)
    doc = report_to_dict(report)
    print(json.dumps({k: doc[k] for k in doc if k != "jobs"}, indent=1, sort_keys=True))


# parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coldboot", description="Startup acceleration toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--store", help=f"store root (default ${STORE_ENV})")
    p.add_argument("--seed", type=int, default=None, help="random seed for simulations")
    top = p.add_subparsers(dest="group", required=True)

    img = top.add_parser("image", help="block-level images, traces and hot sets").add_subparsers(
        dest="cmd", required=True)
    s = img.add_parser("build", help="build an image from a layer spec")
    s.add_argument("spec")
    s.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_image_build)
    s = img.add_parser("trace", help="turn a JSON-lines access log into a block trace")
    s.add_argument("--image", required=True)
    s.add_argument("accesses", help='JSON lines of {"t": ms, "path": ..., "offset": bytes}')
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_image_trace)
    s = img.add_parser("hotset", help="derive the hot set from a trace")
    s.add_argument("trace")
    s.add_argument("--window", type=int, default=DEFAULT_HOT_WINDOW_MS)
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_image_hotset)

    env = top.add_parser("env", help="environment snapshots").add_subparsers(dest="cmd", required=True)
    s = env.add_parser("snapshot", help="run a setup command and snapshot what it changed")
    s.add_argument("root")
    s.add_argument("--params", required=True, help="job parameters JSON (fingerprinted)")
    s.add_argument("--command", required=True, help="shell command run inside ROOT")
    s.add_argument("-o", "--output", help="also write the snapshot file here")
    s.set_defaults(fn=cmd_env_snapshot)
    s = env.add_parser("restore", help="restore a cached environment into ROOT")
    s.add_argument("root")
    s.add_argument("--params", required=True)
    s.add_argument("--snapshot", help="snapshot file instead of the store cache")
    s.set_defaults(fn=cmd_env_restore)

    ck = top.add_parser("ckpt", help="striped checkpoint storage").add_subparsers(dest="cmd", required=True)
    s = ck.add_parser("put", help="stripe a file into the store")
    s.add_argument("file")
    s.add_argument("--id")
    s.add_argument("--groups", type=int, default=StripeConfig.groups)
    s.add_argument("--chunk-size", type=int, default=StripeConfig.chunk_size)
    s.add_argument("--stripe-size", type=int, default=StripeConfig.stripe_size)
    s.add_argument("--map", help="where to write the chunk map (default stdout)")
    s.set_defaults(fn=cmd_ckpt_put)
    s = ck.add_parser("get", help="read a striped file (default stdout)")
    s.add_argument("--map", required=True)
    s.add_argument("--width", type=int, default=8)
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_ckpt_get)

    sim = top.add_parser("sim", help="startup simulation").add_subparsers(dest="cmd", required=True)
    for name, fn, hlp in (("run", cmd_sim_run, "simulate one startup"),
                          ("inject", cmd_sim_inject, "simulate with injected faults"),
                          ("ablate", cmd_sim_ablate, "policy ablation across scales")):
        s = sim.add_parser(name, help=hlp)
        s.add_argument("scenario", nargs="?", help="scenario JSON (defaults when omitted)")
        s.add_argument("--nodes", type=int)
        s.add_argument("--policy", choices=("baseline", "optimized"))
        s.add_argument("--out", help="output directory")
        s.set_defaults(fn=fn)
        if name == "inject":
            s.add_argument("--fault", action="append", required=True,
                           help="slow_node:N[:factor] | corrupt_peer:N | source_throttle[:thr[:pen[:timeout_ms]]]")
        if name == "ablate":
            s.add_argument("--grid", help='{"cells": {...}, "scales_gpus": [...]}')
            s.add_argument("--scales", help="comma-separated GPU counts")
            s.add_argument("--reps", type=int, default=3)

    pr = top.add_parser("profile", help="stage logs and reports").add_subparsers(dest="cmd", required=True)
    s = pr.add_parser("parse", help="validate and normalize stage logs")
    s.add_argument("logs", help="log file or directory of *.log")
    s.add_argument("-o", "--output")
    s.add_argument("--strict", action="store_true", help="exit 1 on malformed lines")
    s.set_defaults(fn=cmd_profile_parse)
    s = pr.add_parser("analyze", help="stage durations and straggler stats")
    s.add_argument("logs")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_profile_analyze)
    s = pr.add_parser("report", help="cluster-wide startup overhead report")
    s.add_argument("jobs_file", nargs="?", help="JSON list of job records")
    s.add_argument("--synthetic-week", action="store_true")
    s.add_argument("--jobs", type=int, default=24, help="job count for --synthetic-week")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_profile_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"coldboot: error: {exc}", file=sys.stderr)
        return 2
    except (ColdbootError, OSError, ValueError, KeyError) as exc:
        print(f"coldboot: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
