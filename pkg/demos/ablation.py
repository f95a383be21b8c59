"""
Policy ablation across job scales
=================================

Turn each optimization on alone and all together, at several GPU counts,
and write the table plus charts.
"""

import tempfile

from coldboot.clustersim import ScenarioConfig
from coldboot.clustersim.ablation import run_ablation

table = run_ablation(ScenarioConfig(), scales_gpus=(16, 64), reps=1)
print(table.to_csv())

for metric in ("image_s", "env_s", "init_s", "e2e_s"):
    print(metric, f"{table.improvement('optimized', 64, metric):.2f}x")

out = tempfile.mkdtemp()
print([p.name for p in table.write(out)])
