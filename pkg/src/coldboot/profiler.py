"""Stage profiler: log ingestion, stage durations, straggler metrics, waste reports.

Log line format, one event per line, single spaces::

    BOOTSTAGE ts=<unix_ms> job=<id> node=<id> stage=<name> edge=<begin|end>

Training is taken to begin at the job-level end of ModelInitialization.
Medians are lower medians.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import MetricError, ReportError
from .svg import bar_chart


class Stage(enum.IntEnum):
    ResourceQueuing = 0
    ResourceAllocation = 1
    ImageLoading = 2
    EnvironmentSetup = 3
    ModelInitialization = 4


class Edge(enum.IntEnum):
    begin = 0
    end = 1


SYNC_STAGES = (Stage.ImageLoading, Stage.EnvironmentSetup, Stage.ModelInitialization)
GPU_STAGES = SYNC_STAGES
HOT_UPDATE_STAGES = (Stage.EnvironmentSetup, Stage.ModelInitialization)

LINE_RE = re.compile(r"^BOOTSTAGE ts=(\d+) job=(\S+) node=(\S+) stage=([A-Za-z]+) edge=(begin|end)$")


def _natural(s: str):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass(frozen=True)
class StageEvent:
    ts: int
    job_id: str
    node_id: str
    stage: Stage
    edge: Edge

    def sort_key(self):
        return (self.ts, _natural(self.node_id), int(self.stage), int(self.edge), self.job_id)

    def format(self) -> str:
        return (f"BOOTSTAGE ts={self.ts} job={self.job_id} node={self.node_id} "
                f"stage={self.stage.name} edge={self.edge.name}")


def format_event(ts: int, job_id: str, node_id, stage: Stage, edge: Edge) -> str:
    return StageEvent(int(ts), str(job_id), str(node_id), stage, edge).format()


@dataclass
class ParseReport:
    lines: int = 0
    events: int = 0
    malformed_count: int = 0
    malformed_lines: list[int] = field(default_factory=list)


def parse_log(lines: Iterable[str]) -> tuple[list[StageEvent], ParseReport]:
    """Parse stage lines; anything else non-blank is skipped and counted as malformed."""
    report = ParseReport()
    events = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        report.lines += 1
        if not line.strip():
            continue
        m = LINE_RE.match(line)
        if m is None or m.group(4) not in Stage.__members__:
            report.malformed_count += 1
            report.malformed_lines.append(lineno)
            continue
        ts, job, node, stage, edge = m.groups()
        events.append(StageEvent(int(ts), job, node, Stage[stage], Edge[edge]))
    events.sort(key=StageEvent.sort_key)
    report.events = len(events)
    return events, report


def read_logs(path: str | Path) -> list[str]:
    """Lines of one log file, or of every ``*.log`` file in a directory (sorted by name)."""
    path = Path(path)
    files = sorted(path.glob("*.log")) if path.is_dir() else [path]
    lines = []
    for f in files:
        lines.extend(f.read_text().splitlines())
    return lines


# durations ---------------------------------------------------------------------

@dataclass
class NodeStartup:
    job_id: str
    startup: int
    node_id: str
    intervals: dict[Stage, tuple[int, int]]
    barrier_wait: dict[Stage, int] = field(default_factory=dict)

    @property
    def durations(self) -> dict[Stage, int]:
        return {s: e - b for s, (b, e) in self.intervals.items()}

    @property
    def node_level_total(self) -> int:
        return sum(self.durations.values())

    @property
    def kind(self) -> str:
        return "full" if min(self.intervals) < Stage.EnvironmentSetup else "hot_update"


@dataclass
class JobStartup:
    job_id: str
    startup: int
    kind: str
    nodes: list[str]
    stage_span: dict[Stage, tuple[int, int]]
    submit: int
    training_begin: int | None

    @property
    def stage_duration(self) -> dict[Stage, int]:
        return {s: e - b for s, (b, e) in self.stage_span.items()}

    @property
    def job_level_total(self) -> int | None:
        return None if self.training_begin is None else self.training_begin - self.submit


@dataclass
class Incomplete:
    job_id: str
    startup: int
    node_id: str
    stage: Stage
    reason: str


@dataclass
class StageDurations:
    nodes: dict[tuple[str, int, str], NodeStartup]
    jobs: dict[tuple[str, int], JobStartup]
    incomplete: list[Incomplete]
    partial: dict[tuple[str, int, str], dict[Stage, tuple[int, int]]] = field(default_factory=dict)

    def nodes_of(self, job_id: str, startup: int = 0) -> list[NodeStartup]:
        return [n for (j, s, _), n in self.nodes.items() if j == job_id and s == startup]

    def node(self, job_id: str, node_id, startup: int = 0) -> NodeStartup:
        return self.nodes[(job_id, startup, str(node_id))]

    def job(self, job_id: str, startup: int = 0) -> JobStartup:
        return self.jobs[(job_id, startup)]


def _segment(events: list[StageEvent]):
    """Split each node's events into startups: a begin of a stage at or before the
    last begun stage opens a new startup."""
    per_node: dict[tuple[str, str], list[StageEvent]] = defaultdict(list)
    for ev in sorted(events, key=StageEvent.sort_key):
        per_node[(ev.job_id, ev.node_id)].append(ev)
    out: dict[tuple[str, int, str], list[StageEvent]] = {}
    for (job, node), evs in per_node.items():
        idx, last = 0, None
        for ev in evs:
            if ev.edge is Edge.begin:
                if last is not None and ev.stage <= last:
                    idx += 1
                last = ev.stage
            out.setdefault((job, idx, node), []).append(ev)
    return out


def compute_durations(events: Iterable[StageEvent]) -> StageDurations:
    """Per-node stage durations, job-level spans and per-node barrier waits.

    A node-startup with any unmatched edge is reported in ``incomplete`` and
    left out of every aggregate; its matched intervals stay in ``partial``.
    """
    segments = _segment(list(events))
    nodes: dict[tuple[str, int, str], NodeStartup] = {}
    partial = {}
    incomplete: list[Incomplete] = []
    for key, evs in segments.items():
        open_: dict[Stage, int] = {}
        intervals: dict[Stage, tuple[int, int]] = {}
        bad = False
        for ev in evs:
            if ev.edge is Edge.begin:
                open_[ev.stage] = ev.ts
            elif ev.stage in open_:
                intervals[ev.stage] = (open_.pop(ev.stage), ev.ts)
            else:
                incomplete.append(Incomplete(*key, ev.stage, "end without begin"))
                bad = True
        for stage in open_:
            incomplete.append(Incomplete(*key, stage, "begin without end"))
            bad = True
        if bad or not intervals:
            partial[key] = intervals
        else:
            nodes[key] = NodeStartup(*key, intervals)

    jobs: dict[tuple[str, int], JobStartup] = {}
    grouped: dict[tuple[str, int], list[NodeStartup]] = defaultdict(list)
    for (job, idx, _), ns in sorted(nodes.items(), key=lambda kv: (kv[0][0], kv[0][1], _natural(kv[0][2]))):
        grouped[(job, idx)].append(ns)
    for (job, idx), members in grouped.items():
        spans = {}
        for stage in Stage:
            ivs = [m.intervals[stage] for m in members if stage in m.intervals]
            if ivs:
                spans[stage] = (min(b for b, _ in ivs), max(e for _, e in ivs))
        for m in members:
            m.barrier_wait = {s: spans[s][1] - m.intervals[s][1] for s in SYNC_STAGES if s in m.intervals}
        submit = min(b for b, _ in spans.values())
        train = spans[Stage.ModelInitialization][1] if Stage.ModelInitialization in spans else None
        kind = "full" if min(spans) < Stage.EnvironmentSetup else "hot_update"
        jobs[(job, idx)] = JobStartup(job, idx, kind, [m.node_id for m in members], spans, submit, train)
    return StageDurations(nodes, jobs, incomplete, partial)


# stragglers --------------------------------------------------------------------

def lower_median(values: list[float]) -> float:
    if not values:
        raise MetricError("median of empty set")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def max_median_ratio(values: list[float]) -> float:
    med = lower_median(values)
    if med <= 0:
        raise MetricError(f"non-positive median {med}")
    return max(values) / med


@dataclass
class StragglerStats:
    job_id: str
    startup: int
    stage: Stage
    count: int
    max: float
    median: float
    max_median_ratio: float


def straggler_stats(durations: StageDurations, by_stage: Iterable[Stage] | Stage | None = None
                    ) -> list[StragglerStats]:
    """Max/median of per-node stage durations for every job startup and requested stage."""
    if by_stage is None:
        stages = list(Stage)
    elif isinstance(by_stage, Stage):
        stages = [by_stage]
    else:
        stages = list(by_stage)
    out = []
    for (job, idx) in durations.jobs:
        members = durations.nodes_of(job, idx)
        for stage in stages:
            vals = [m.durations[stage] for m in members if stage in m.intervals]
            if not vals:
                continue
            out.append(StragglerStats(job, idx, stage, len(vals), max(vals), lower_median(vals),
                                      max_median_ratio(vals)))
    return out


# analysis of a log set ---------------------------------------------------------

@dataclass
class Analysis:
    events: list[StageEvent]
    report: ParseReport
    durations: StageDurations
    stragglers: list[StragglerStats]


def analyze(lines: Iterable[str]) -> Analysis:
    events, report = parse_log(lines)
    durations = compute_durations(events)
    stats = []
    for st in straggler_stats(durations, SYNC_STAGES):
        stats.append(st)
    return Analysis(events, report, durations, stats)


def _stage_row_csv(durations: StageDurations) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["job_id", "startup", "node_id", "stage", "begin_ms", "end_ms", "duration_ms", "barrier_wait_ms"])
    for (job, idx, node), ns in sorted(durations.nodes.items(),
                                       key=lambda kv: (kv[0][0], kv[0][1], _natural(kv[0][2]))):
        for stage, (b, e) in sorted(ns.intervals.items()):
            w.writerow([job, idx, node, stage.name, b, e, e - b, ns.barrier_wait.get(stage, 0)])
    return buf.getvalue()


def analysis_to_dict(a: Analysis) -> dict:
    jobs = []
    for (job, idx), js in sorted(a.durations.jobs.items()):
        members = a.durations.nodes_of(job, idx)
        jobs.append({
            "job_id": job, "startup": idx, "kind": js.kind, "nodes": len(js.nodes),
            "job_level_total_ms": js.job_level_total,
            "node_level_total_ms": {m.node_id: m.node_level_total for m in members},
            "stage_span_ms": {s.name: d for s, d in sorted(js.stage_duration.items())},
        })
    return {
        "parse": asdict(a.report),
        "jobs": jobs,
        "stragglers": [{**asdict(s), "stage": s.stage.name} for s in a.stragglers],
        "incomplete": [{**asdict(i), "stage": i.stage.name} for i in a.durations.incomplete],
    }


def write_analysis(a: Analysis, out_dir: str | Path) -> list[Path]:
    """Emit ``stages.csv``, ``analysis.json`` and SVG charts; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = out / name
        p.write_text(text)
        written.append(p)

    put("stages.csv", _stage_row_csv(a.durations))
    put("analysis.json", json.dumps(analysis_to_dict(a), indent=1, sort_keys=True) + "\n")
    keys = sorted(a.durations.jobs)
    cats = [f"{j}#{i}" for j, i in keys]
    series = {s.name: [a.durations.jobs[k].stage_duration.get(s, 0) / 1000 for k in keys] for s in SYNC_STAGES}
    put("stage_spans.svg", bar_chart("Job-level stage spans", cats, series, "seconds"))
    ratios = {s.name: [next((x.max_median_ratio for x in a.stragglers
                             if (x.job_id, x.startup) == k and x.stage == s), 0.0) for k in keys]
              for s in SYNC_STAGES}
    put("max_median.svg", bar_chart("Max/Median ratio per stage", cats, ratios, "ratio"))
    return written


# cluster waste report ----------------------------------------------------------

MS_PER_HOUR = 3_600_000
SCALE_BUCKETS = ((1, 8), (9, 32), (33, 128), (129, 512), (513, 2048), (2049, None))


def scale_bucket(gpus: int) -> str:
    for lo, hi in SCALE_BUCKETS:
        if gpus >= lo and (hi is None or gpus <= hi):
            return f"{lo}-{hi}" if hi is not None else f">{lo - 1}"
    return "0"


@dataclass
class JobRecord:
    """One job over the reporting window: its stage events and per-node training spans (ms)."""

    job_id: str
    gpus_per_node: int
    events: list[StageEvent]
    training_spans: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    def to_dict(self):
        return {"job_id": self.job_id, "gpus_per_node": self.gpus_per_node,
                "events": [e.format() for e in self.events],
                "training_spans": {n: [list(s) for s in spans] for n, spans in self.training_spans.items()}}

    @classmethod
    def from_dict(cls, doc):
        events, _ = parse_log(doc["events"])
        spans = {str(n): [tuple(s) for s in v] for n, v in doc.get("training_spans", {}).items()}
        return cls(doc["job_id"], int(doc["gpus_per_node"]), events, spans)


@dataclass
class JobSummary:
    job_id: str
    nodes: int
    gpus: int
    startups: int
    full_startups: int
    hot_updates: int
    mean_job_level_s: float
    mean_node_level_s: float
    env_max_median: float | None
    startup_server_hours: float
    training_server_hours: float


@dataclass
class WasteReport:
    jobs: list[JobSummary]
    training_server_hours: float = 0.0
    startup_server_hours: float = 0.0
    training_gpu_hours: float = 0.0
    startup_gpu_hours: float = 0.0

    @property
    def startup_share(self) -> float:
        total = self.training_server_hours + self.startup_server_hours
        return self.startup_server_hours / total if total else 0.0

    @property
    def startup_gpu_share(self) -> float:
        total = self.training_gpu_hours + self.startup_gpu_hours
        return self.startup_gpu_hours / total if total else 0.0

    def by_scale(self) -> list[dict]:
        rows = []
        for lo, hi in SCALE_BUCKETS:
            label = scale_bucket(lo)
            members = [j for j in self.jobs if scale_bucket(j.gpus) == label]
            if not members:
                continue
            ratios = [j.env_max_median for j in members if j.env_max_median is not None]
            st = sum(j.startup_server_hours * j.gpus / j.nodes for j in members)
            tr = sum(j.training_server_hours * j.gpus / j.nodes for j in members)
            rows.append({
                "scale": label, "jobs": len(members),
                "mean_job_level_s": sum(j.mean_job_level_s for j in members) / len(members),
                "mean_node_level_s": sum(j.mean_node_level_s for j in members) / len(members),
                "mean_startups": sum(j.startups for j in members) / len(members),
                "mean_env_max_median": sum(ratios) / len(ratios) if ratios else None,
                "startup_gpu_share": st / (st + tr) if st + tr else 0.0,
            })
        return rows


def _check_overlaps(job_id, node_id, intervals):
    conflicts = []
    ordered = sorted(intervals)
    for (b1, e1, n1), (b2, e2, n2) in zip(ordered, ordered[1:]):
        if b2 < e1:
            conflicts.append((job_id, node_id, n1, n2, b2, e1))
    return conflicts


def cluster_report(jobs: Iterable[JobRecord]) -> WasteReport:
    """Split server-hours into training and GPU-consuming startup time.

    Startup time per node and startup is the node's own duration plus its
    barrier wait for ImageLoading, EnvironmentSetup and ModelInitialization;
    queuing and allocation do not hold GPUs.
    """
    summaries = []
    conflicts = []
    totals = dict(train_s=0.0, start_s=0.0, train_g=0.0, start_g=0.0)
    for job in jobs:
        d = compute_durations(job.events)
        starts = sorted({idx for (j, idx) in d.jobs if j == job.job_id}
                        | {idx for (j, idx, _) in d.partial if j == job.job_id})
        node_ids = sorted({n for (j, _, n) in list(d.nodes) + list(d.partial) if j == job.job_id}
                          | set(job.training_spans), key=_natural)
        startup_ms = 0
        per_node_intervals = defaultdict(list)
        for (j, idx, node), ns in list(d.nodes.items()):
            span = d.jobs[(j, idx)].stage_span
            for s in GPU_STAGES:
                if s in ns.intervals:
                    b = ns.intervals[s][0]
                    e = span[s][1]
                    startup_ms += e - b
                    per_node_intervals[node].append((b, e, f"startup{idx}:{s.name}"))
        for (j, idx, node), ivs in d.partial.items():
            for s in GPU_STAGES:
                if s in ivs:
                    b, e = ivs[s]
                    startup_ms += e - b
                    per_node_intervals[node].append((b, e, f"startup{idx}:{s.name}"))
        train_ms = 0
        for node, spans in job.training_spans.items():
            for k, (b, e) in enumerate(spans):
                if e < b:
                    conflicts.append((job.job_id, node, "training", "training", b, e))
                train_ms += e - b
                per_node_intervals[node].append((b, e, f"training{k}"))
        for node, ivs in per_node_intervals.items():
            conflicts.extend(_check_overlaps(job.job_id, node, ivs))
        n_nodes = max(len(node_ids), 1)
        js = [d.jobs[(job.job_id, i)] for i in starts if (job.job_id, i) in d.jobs]
        jl = [x.job_level_total for x in js if x.job_level_total is not None]
        nl = [n.node_level_total for n in d.nodes.values()]
        env = [s.max_median_ratio for s in straggler_stats(d, Stage.EnvironmentSetup)]
        summaries.append(JobSummary(
            job.job_id, n_nodes, n_nodes * job.gpus_per_node, len(starts),
            sum(1 for x in js if x.kind == "full"), sum(1 for x in js if x.kind == "hot_update"),
            (sum(jl) / len(jl) / 1000) if jl else 0.0, (sum(nl) / len(nl) / 1000) if nl else 0.0,
            max(env) if env else None, startup_ms / MS_PER_HOUR, train_ms / MS_PER_HOUR))
        totals["start_s"] += startup_ms / MS_PER_HOUR
        totals["train_s"] += train_ms / MS_PER_HOUR
        totals["start_g"] += startup_ms / MS_PER_HOUR * job.gpus_per_node
        totals["train_g"] += train_ms / MS_PER_HOUR * job.gpus_per_node
    if conflicts:
        raise ReportError(conflicts)
    return WasteReport(summaries, totals["train_s"], totals["start_s"], totals["train_g"], totals["start_g"])


def report_to_dict(report: WasteReport) -> dict:
    return {
        "training_server_hours": report.training_server_hours,
        "startup_server_hours": report.startup_server_hours,
        "startup_share": report.startup_share,
        "training_gpu_hours": report.training_gpu_hours,
        "startup_gpu_hours": report.startup_gpu_hours,
        "startup_gpu_share": report.startup_gpu_share,
        "by_scale": report.by_scale(),
        "jobs": [asdict(j) for j in report.jobs],
    }


def write_report(report: WasteReport, out_dir: str | Path) -> list[Path]:
    """Write ``jobs.csv``, ``scales.csv``, ``report.json`` and chart SVGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = out / name
        p.write_text(text)
        written.append(p)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(JobSummary.__dataclass_fields__)
    w.writerow(cols)
    for j in report.jobs:
        w.writerow([getattr(j, c) for c in cols])
    put("jobs.csv", buf.getvalue())

    scales = report.by_scale()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    scols = ["scale", "jobs", "mean_job_level_s", "mean_node_level_s", "mean_startups",
             "mean_env_max_median", "startup_gpu_share"]
    w.writerow(scols)
    for row in scales:
        w.writerow([row[c] for c in scols])
    put("scales.csv", buf.getvalue())
    put("report.json", json.dumps(report_to_dict(report), indent=1, sort_keys=True) + "\n")

    cats = [r["scale"] for r in scales]
    put("gpu_hours.svg", bar_chart("Server-hours: training vs startup", ["training", "startup"],
                                   {"server-hours": [report.training_server_hours, report.startup_server_hours]},
                                   "hours"))
    put("overhead_by_scale.svg", bar_chart(
        "Startup overhead by job scale (GPUs)", cats,
        {"job-level": [r["mean_job_level_s"] for r in scales],
         "node-level": [r["mean_node_level_s"] for r in scales]}, "seconds"))
    put("startups_by_scale.svg", bar_chart("Startups per job by scale", cats,
                                           {"startups": [r["mean_startups"] for r in scales]}, "count"))
    put("max_median_by_scale.svg", bar_chart(
        "Environment setup Max/Median by scale", cats,
        {"max/median": [r["mean_env_max_median"] or 0.0 for r in scales]}, "ratio"))
    return written
