"""Policy ablations and straggler sweeps over repeated scenario runs."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..profiler import Stage, compute_durations, lower_median, straggler_stats
from ..svg import bar_chart
from .scenario import JobRun, Policies, ScenarioConfig, run_scenario

DEFAULT_SCALES_GPUS = (16, 32, 48, 64, 128)
DEFAULT_REPS = 3
METRICS = ("image_s", "env_s", "init_s", "e2e_s", "env_max_median")


def default_cells() -> dict[str, Policies]:
    """Baseline, each optimization alone, and all three together."""
    return {
        "baseline": Policies.baseline(),
        "image_prefetch": Policies(image="prefetch"),
        "env_cache": Policies(env="cache"),
        "striped_ckpt": Policies(ckpt="striped"),
        "optimized": Policies.optimized(),
    }


def load_grid(path) -> tuple[dict[str, Policies], list[int]]:
    """Grid file: ``{"cells": {name: {policy fields}}, "scales_gpus": [...]}``."""
    doc = json.loads(Path(path).read_text())
    cells = {}
    for name, pol in (doc.get("cells") or {}).items():
        try:
            cells[name] = Policies(**pol)
        except TypeError as exc:
            raise ConfigError(f"cell {name}: {exc}") from None
    return cells or default_cells(), list(doc.get("scales_gpus", DEFAULT_SCALES_GPUS))


def run_metrics(run: JobRun) -> dict[str, float]:
    """Job-level stage spans in seconds; ``e2e_s`` runs from gang launch to the end of model init."""
    if run.failed:
        raise ConfigError(f"run failed: {run.failure}")
    d = compute_durations(run.events)
    job = d.job(run.job_id)
    span = job.stage_span
    out = {
        "image_s": (span[Stage.ImageLoading][1] - span[Stage.ImageLoading][0]) / 1000
        if Stage.ImageLoading in span else 0.0,
        "env_s": (span[Stage.EnvironmentSetup][1] - span[Stage.EnvironmentSetup][0]) / 1000,
        "init_s": (span[Stage.ModelInitialization][1] - span[Stage.ModelInitialization][0]) / 1000,
    }
    first = span[Stage.ImageLoading][0] if Stage.ImageLoading in span else span[Stage.EnvironmentSetup][0]
    out["e2e_s"] = (span[Stage.ModelInitialization][1] - first) / 1000
    env = straggler_stats(d, Stage.EnvironmentSetup)
    out["env_max_median"] = env[0].max_median_ratio
    return out


@dataclass
class AblationRow:
    cell: str
    gpus: int
    nodes: int
    reps: list[dict[str, float]]

    @property
    def mean(self) -> dict[str, float]:
        return {k: float(np.mean([r[k] for r in self.reps])) for k in METRICS}


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def row(self, cell: str, gpus: int) -> AblationRow:
        for r in self.rows:
            if r.cell == cell and r.gpus == gpus:
                return r
        raise KeyError((cell, gpus))

    def improvement(self, cell: str, gpus: int, metric: str, baseline: str = "baseline") -> float:
        """Baseline mean divided by the cell mean; >1 means faster."""
        return self.row(baseline, gpus).mean[metric] / self.row(cell, gpus).mean[metric]

    def to_dict(self) -> dict:
        return {"rows": [{"cell": r.cell, "gpus": r.gpus, "nodes": r.nodes, "mean": r.mean, "reps": r.reps}
                         for r in self.rows]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "gpus", "nodes", *METRICS])
        for r in self.rows:
            m = r.mean
            w.writerow([r.cell, r.gpus, r.nodes, *(f"{m[k]:.3f}" for k in METRICS)])
        return buf.getvalue()

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cells = list(dict.fromkeys(r.cell for r in self.rows))
        scales = sorted({r.gpus for r in self.rows})
        files = {
            "ablation.csv": self.to_csv(),
            "ablation.json": json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n",
        }
        for metric, title in (("e2e_s", "End-to-end startup"), ("image_s", "Image loading"),
                              ("env_s", "Environment setup"), ("init_s", "Model initialization")):
            series = {c: [self.row(c, g).mean[metric] for g in scales] for c in cells}
            files[f"ablation_{metric}.svg"] = bar_chart(f"{title} by scale", [f"{g} GPUs" for g in scales],
                                                        series, ylabel="seconds")
        written = []
        for name, text in files.items():
            (out / name).write_text(text)
            written.append(out / name)
        return written


def run_ablation(base: ScenarioConfig, cells: dict[str, Policies] | None = None,
                 scales_gpus=DEFAULT_SCALES_GPUS, reps: int = DEFAULT_REPS) -> AblationTable:
    """Run every policy cell at every GPU scale ``reps`` times; seeds are ``base.seed + rep``."""
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    cells = cells or default_cells()
    table = AblationTable()
    for gpus in scales_gpus:
        if gpus % base.gpus_per_node:
            raise ConfigError(f"{gpus} GPUs is not a multiple of {base.gpus_per_node} per node")
        nodes = gpus // base.gpus_per_node
        for name, pol in cells.items():
            reps_out = []
            for rep in range(reps):
                cfg = dataclasses.replace(base, nodes=nodes, seed=base.seed + rep, policies=pol,
                                          job_id=f"{name}-{gpus}-{rep}")
                reps_out.append(run_metrics(run_scenario(cfg)))
            table.rows.append(AblationRow(name, gpus, nodes, reps_out))
    return table


def straggler_sweep(base: ScenarioConfig, node_counts=(8, 16, 32, 64), seeds=(0, 1, 2)) -> dict[int, float]:
    """Lower median over seeds of the EnvironmentSetup max/median ratio, per node count."""
    out = {}
    for n in node_counts:
        ratios = [run_metrics(run_scenario(dataclasses.replace(base, nodes=n, seed=s)))["env_max_median"]
                  for s in seeds]
        out[n] = lower_median(ratios)
    return out
