"""Train an IAM and a memoryless FNN on the warehouse and compare them.

Short by default; pass a step budget for a fuller run, e.g. 300000.

    python demos/03_warehouse_memory.py [total_steps] [out_dir]
"""

import sys
from pathlib import Path

from iamlab.config import resolve
from iamlab.experiment import read_metrics, train_one
from iamlab.plots import plot_curves

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 40_000
out = Path(sys.argv[2] if len(sys.argv) > 2 else "runs/demo_warehouse")
ppo = {"total_steps": steps, "lr": 1e-3, "gamma": 0.95, "ent_coef": 0.001}

series, finals = {}, {}
for label, policy in [("IAM (manual d-set)", {"variant": "iam", "selector": "manual"}),
                      ("FNN (no memory)", {"variant": "fnn", "stack": 1})]:
    cfg = resolve({"env": {"name": "warehouse"}, "policy": policy, "ppo": ppo,
                   "eval": {"episodes": 50}})
    rec = train_one(cfg, 0, out / policy["variant"])
    series[label] = [read_metrics(rec.metrics_path)]
    finals[label] = rec.final_return
    print(f"{label:22s} final return {rec.final_return:6.2f}  ({rec.runtime:.0f}s)")

path = plot_curves(series, out / "curves.svg", references={"FNN final": finals["FNN (no memory)"]})
print("learning curves:", path)
