"""
Profiling stage logs
====================

Parse per-node stage logs, measure stage durations and stragglers, and
split a week of cluster time into training and startup.
"""

from coldboot.clustersim import ScenarioConfig, run_scenario
from coldboot.clustersim.workload import synthetic_week
from coldboot.profiler import Stage, analyze, cluster_report, report_to_dict

run = run_scenario(ScenarioConfig(nodes=32, seed=1))
lines = run.log_lines() + ["a stray line from some other logger"]

a = analyze(lines)
print("events:", a.report.events, "malformed:", a.report.malformed_count)
for st in a.stragglers:
    print(f"{st.stage.name:20s} median {st.median / 1000:7.1f} s  max {st.max / 1000:7.1f} s  "
          f"ratio {st.max_median_ratio:.2f}")

# %%
# Per node, the waits at each barrier show who held everyone else up.

waits = {n.node_id: n.barrier_wait[Stage.EnvironmentSetup] for n in a.durations.nodes_of(run.job_id)}
print("longest env barrier wait:", max(waits.values()) / 1000, "s")

# %%
# A synthetic week of mixed-scale jobs with hot updates.

report = cluster_report(synthetic_week(seed=0, jobs=6))
print(f"startup share of server time: {report.startup_share:.2%}")
for row in report_to_dict(report)["by_scale"]:
    print(row["scale"], row["jobs"], "jobs", f"mean startups {row['mean_startups']:.1f}")
