"""Shared-segment length ablation on the lane-change fixture.

Runs the same seeds with Ns = 0, 8 and 15 and prints the mean absolute yaw
rate, jerk and solve time for each.  Takes about a minute.
"""

import numpy as np

from cpto.cli import simulate
from cpto.config import from_dict
from cpto.planner import compute_metrics

seeds = range(5)
print(f"{'Ns':>3s} {'|yaw rate|':>11s} {'|jy|':>8s} {'solve ms':>9s} {'collide':>8s}")
for Ns in (0, 8, 15):
    cfg = from_dict({"scenario": "lane-change", "steps": 200, "planner": {"Ns": Ns}})
    ms = [compute_metrics(simulate(cfg, s), cfg.v_target) for s in seeds]
    avg = lambda key: np.mean([getattr(m, key) for m in ms])
    print(f"{Ns:3d} {avg('mean_abs_yaw_rate'):11.5f} {avg('mean_abs_jy'):8.4f} "
          f"{avg('mean_solve_ms'):9.2f} {avg('collision_rate'):8.3f}")
