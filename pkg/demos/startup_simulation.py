"""
Simulating a gang-scheduled startup
===================================

One job startup on a shared cluster: queueing, allocation, image pull,
environment setup and model initialization, with barriers between stages.
Compare the default policies with all optimizations on, then inject faults.
"""

from coldboot.clustersim import Policies, ScenarioConfig, inject_fault, parse_fault, run_scenario
from coldboot.clustersim.ablation import run_metrics

base = ScenarioConfig(nodes=16, seed=3)

for name, pol in (("baseline", Policies.baseline()), ("optimized", Policies.optimized())):
    m = run_metrics(run_scenario(base.with_policies(**pol.__dict__)))
    print(f"{name:9s} image {m['image_s']:6.1f} s  env {m['env_s']:6.1f} s  "
          f"init {m['init_s']:6.1f} s  total {m['e2e_s']:6.1f} s  env max/median {m['env_max_median']:.2f}")

# %%
# A node with a slow disk stretches every barrier it takes part in.

slow = run_metrics(run_scenario(inject_fault(base, parse_fault("slow_node:5:3.0"))))
print("slow node env max/median:", round(slow["env_max_median"], 2))

# %%
# A package mirror that throttles past a few concurrent downloads, with a
# per-download timeout, fails the startup.

run = run_scenario(inject_fault(ScenarioConfig(nodes=32), parse_fault("source_throttle:4:20:10000")))
print(run.failure)

# %%
# Every run writes one stage log per node plus a manifest; the same seed
# gives byte-identical files.

run = run_scenario(base)
print(run.log_lines(0)[:4])
