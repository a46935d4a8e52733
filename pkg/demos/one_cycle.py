"""One planning cycle on a three-lane road with a slow leader.

Prints the candidate lane targets, the solver report and the first executed
state, then checks that every candidate shares the same opening segment.
"""

import numpy as np

from cpto.bezier import build_basis
from cpto.planner import EgoState, PlannerConfig, PlannerState, receding_horizon_step, state_at_step
from cpto.world import Obstacle, World, lane_centers

cfg = PlannerConfig()
basis = build_basis(cfg.n, cfg.N, cfg.T)
state = PlannerState(basis)
lanes = lane_centers()
world = World("constant-velocity", lanes=lanes,
              obstacles=[Obstacle(0, 35.0, 0.0, 8.0, s_e=1e3), Obstacle(1, 55.0, 7.2, 12.0, s_e=1e3)])
ego = EgoState(0.0, 0.0, v=15.0)

step = receding_horizon_step(world, ego, cfg, state, np.random.default_rng(0), 15.0, lanes=lanes)
rep = step.report
print(f"converged {rep.converged} after {rep.iterations} iterations, residual {rep.final_residual:.2e}")
print(f"selected candidate {step.selected}")
print(f"executed: x {step.executed.px:.3f} m, y {step.executed.py:.3f} m, v {step.executed.v:.3f} m/s")

first = [state_at_step(step.batch, basis, j, cfg.Ns) for j in range(cfg.Nc)]
spread = max(np.hypot(a.px - b.px, a.py - b.py) for a in first for b in first)
print(f"position spread across candidates at the end of the shared segment: {spread:.2e} m")
