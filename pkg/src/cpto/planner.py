"""
Receding-horizon loop: observe, build hypotheses, solve the batch, select, execute.

Only the first step of the chosen candidate is executed.  Because all
candidates share their first ``Ns`` steps, the executed state does not depend
on which candidate wins the selection.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import barrier
from .bezier import BasisSet, ControlPointBatch, build_basis, eval_states
from .solver import SolverConfig, SolveReport, StateBounds, assemble, solve
from .world import EllipseParams, Scenario, build_configurations, observe, step_world

# truth-side collision ellipse: the minimum planning axes
COLLISION_AXES = (6.0, 4.5)
DIST_CAP = 1e3


@dataclass
class EgoState:
    px: float
    py: float
    theta: float = 0.0
    theta_dot: float = 0.0
    v: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    jx: float = 0.0
    jy: float = 0.0

    @property
    def vx(self) -> float:
        return self.v * math.cos(self.theta)

    @property
    def vy(self) -> float:
        return self.v * math.sin(self.theta)


@dataclass
class Ranges:
    px: tuple = (-500.0, 5000.0)
    v: tuple = (0.0, 24.0)
    ax: tuple = (-4.0, 3.0)
    ay: tuple = (-5.0, 5.0)
    jx: tuple = (-6.0, 6.0)
    jy: tuple = (-6.0, 6.0)


def clamp_state(s: EgoState, r: Ranges) -> EgoState:
    c = lambda v, lim: float(min(max(v, lim[0]), lim[1]))
    return EgoState(c(s.px, r.px), s.py, s.theta, s.theta_dot, c(s.v, r.v),
                    c(s.ax, r.ax), c(s.ay, r.ay), c(s.jx, r.jx), c(s.jy, r.jy))


@dataclass
class EvaluationWeights:
    safety: float = 1.0
    comfort: float = 0.3
    accuracy: float = 0.5

    def __post_init__(self):
        w = (self.safety, self.comfort, self.accuracy)
        if min(w) < 0 or max(w) == 0:
            raise ValueError("weights must be nonnegative and not all zero")


@dataclass
class PlannerConfig:
    n: int = 10
    N: int = 40
    T: float = 4.0
    Nc: int = 5
    M: int = 5
    Ns: int = 6
    alpha_init: float = 0.2
    counts: list | None = None
    stagger: float = 0.0
    target_mode: str = "shared"   # "shared", "adaptive" (per hypothesis) or "cycle"
    lane_width: float = 3.6
    desired_lane_bonus: float = 30.0
    inflation: float = 1.05
    ellipse: EllipseParams = field(default_factory=EllipseParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: EvaluationWeights = field(default_factory=EvaluationWeights)
    ranges: Ranges = field(default_factory=Ranges)

    @property
    def dt(self) -> float:
        return self.T / self.N


@dataclass
class PlanStep:
    batch: ControlPointBatch
    selected: int
    executed: EgoState
    report: SolveReport
    costs: np.ndarray          # Nc x 3: safety term, comfort, accuracy
    min_h: np.ndarray          # Nc, own-configuration horizon minimum
    invariance: barrier.InvarianceReport
    flagged: bool = False      # no candidate passed the barrier filter
    fallback: bool = False     # solver did not converge; previous plan used
    targets: tuple = ()


@dataclass
class PlannerState:
    """Carries the warm start and the fallback plan between cycles."""
    basis: BasisSet
    prev_batch: ControlPointBatch | None = None
    plan: ControlPointBatch | None = None   # single column actually being followed
    plan_age: int = 0
    prev_ws: object = None
    prev_data: object = None
    warm_duals: bool = False


def _lane_order(ego_y: float, lanes) -> list:
    lanes = sorted(float(l) for l in lanes)
    return sorted(lanes, key=lambda l: (abs(l - ego_y), l))


def sample_terminal_targets(ego, lanes, v_target: float, T: float, Nc: int, stagger: float = 0.0,
                            configs=None, margin: float = 1.05, desired_lane: float | None = None):
    """Terminal positions per candidate.

    Lateral targets cycle over the given lane centers starting with the
    desired lane if one is given, else the one nearest the ego.  With
    `configs`, a target inside a predicted terminal ellipse is slid along its
    lane to the nearest point outside it, since the terminal position is a
    hard constraint.
    """
    if Nc < 1:
        raise ValueError("need at least one candidate")
    order = _lane_order(ego.py, lanes) if len(lanes) else [ego.py]
    if desired_lane is not None:
        order.sort(key=lambda l: not math.isclose(l, desired_lane))
    PyN = np.array([order[j % len(order)] for j in range(Nc)])
    frac = np.linspace(-stagger, stagger, Nc) if Nc > 1 else np.zeros(1)
    PxN = ego.px + v_target * T * (1.0 + frac)
    if configs is not None:
        for j, cfg in enumerate(configs):
            PxN[j] = _clear_terminal(PxN[j], PyN[j], cfg, ego.px, margin)
    return PxN, PyN


def _clear_terminal(x: float, y: float, cfg, x_min: float, margin: float, headway: float = 1.0) -> float:
    """Slide a terminal point along its lane out of every terminal ellipse.

    The rear of each ellipse is stretched by `headway` seconds of the
    obstacle's speed, so a target behind a moving leader leaves a following
    gap rather than arriving on its bumper.
    """
    ox, oy, lx, ly = cfg.ox[-1], cfg.oy[-1], cfg.lx[-1] * margin, cfg.ly[-1] * margin
    act = np.flatnonzero(cfg.mask)
    for _ in range(2 * act.size + 1):
        spans = []
        for i in act:
            r = 1.0 - ((y - oy[i]) / ly[i]) ** 2
            if r <= 0.0:
                continue
            half = lx[i] * math.sqrt(r) + 1e-6
            back = ox[i] - half - headway * max(cfg.obstacles[i].vx, 0.0)
            # an obstacle still ahead of the ego cannot be jumped over in its lane
            behind = cfg.ox[0, i] < x_min
            if back < x and (x < ox[i] + half or not behind):
                spans.append((back, ox[i] + half, behind))
        if not spans:
            return x
        back, fwd, behind = min(spans)
        x = fwd if behind else max(back, x_min)
    return x


def lane_clearance(ego, lane: float, cfg, v: float | None = None, dt: float = 0.1) -> float:
    """Distance the ego covers in `lane` before sharing a predicted ellipse with an obstacle.

    The ego is advanced at constant speed `v` (its own speed by default), so
    traffic moving with the ego does not block a lane and a faster car
    closing from behind does.
    """
    v = ego.v if v is None else v
    x = ego.px + v * dt * np.arange(1, cfg.ox.shape[0] + 1)[:, None]
    hit = cfg.step_mask & (np.abs(cfg.oy - lane) < cfg.ly) & (np.abs(cfg.ox - x) < cfg.lx)
    rows = np.flatnonzero(hit.any(axis=1))
    if rows.size == 0:
        return np.inf
    return float(x[rows[0], 0] - ego.px)


def adaptive_terminal_targets(ego, lanes, v_target: float, T: float, configs, lane_width: float = 3.6,
                              desired_lane: float | None = None, bonus: float = 30.0, margin: float = 1.05,
                              shared: bool = True, switch_cost: float = 5.0):
    """Lane choice by clearance: the lane that stays free the longest.

    Clearance is capped at the horizon length so that free lanes tie, and ties
    go to the lane nearest the ego.  Every lane is a candidate because safety
    ellipses wider than a lane can block the adjacent lanes as well.  The
    desired lane (if any) gets `bonus`, and each lane width of lateral offset
    costs `switch_cost` metres of clearance, which stops noisy clearances
    from flipping the choice every cycle.

    With `shared` the lane is chosen once against the richest hypothesis (the
    one with the most obstacles) and given to every candidate, together with
    a terminal point slid clear of that hypothesis' ellipses; otherwise each
    hypothesis picks its own.  Per-hypothesis targets let the sparse
    hypotheses pull the shared segment straight past obstacles only the
    dense ones see.
    """
    reach = _lane_order(ego.py, lanes) if len(lanes) else [ego.py]
    horizon = max(v_target * T, 1.0) + 10.0

    def best_lane(cfg):
        score = [min(lane_clearance(ego, l, cfg, v_target, T / cfg.ox.shape[0]), horizon)
                 + (bonus if desired_lane is not None and math.isclose(l, desired_lane) else 0.0)
                 - switch_cost * abs(l - ego.py) / lane_width
                 for l in reach]
        return reach[int(np.argmax(score))]

    PxN = np.full(len(configs), ego.px + v_target * T)
    PyN = np.empty(len(configs))
    if shared and configs:
        richest = configs[max(range(len(configs)), key=lambda j: (configs[j].count, j))]
        PyN[:] = best_lane(richest)
        PxN[:] = _clear_terminal(PxN[0], PyN[0], richest, ego.px, margin)
        return PxN, PyN
    for j, cfg in enumerate(configs):
        PyN[j] = best_lane(cfg)
        PxN[j] = _clear_terminal(PxN[j], PyN[j], cfg, ego.px, margin)
    return PxN, PyN


def _horizon_min_h(s, j: int, cfg) -> float:
    if not cfg.mask.any():
        return np.inf
    d = barrier.scale_factor(s.px[:, [j]], s.py[:, [j]], cfg.ox, cfg.oy, cfg.lx, cfg.ly)
    return float(np.min(np.where(cfg.step_mask, d - 1.0, np.inf)))


def candidate_min_h(batch: ControlPointBatch, configs, basis: BasisSet) -> np.ndarray:
    """Horizon min barrier value of each candidate under its own configuration."""
    s = eval_states(batch, basis)
    return np.array([_horizon_min_h(s, j, cfg) for j, cfg in enumerate(configs)])


def worst_case_min_h(batch: ControlPointBatch, configs, basis: BasisSet) -> np.ndarray:
    """Horizon min barrier value of each candidate under every configuration."""
    s = eval_states(batch, basis)
    return np.array([min(_horizon_min_h(s, j, cfg) for cfg in configs) for j in range(batch.Nc)])


def candidate_costs(batch: ControlPointBatch, configs, basis: BasisSet, v_target: float,
                    desired_lane: float | None = None):
    """Per-candidate (safety, comfort, accuracy) terms and horizon min barrier value.

    Feasibility uses each candidate's own configuration, but the safety cost
    is scored against all of them, so a candidate that ignores obstacles seen
    only by richer hypotheses pays for it.
    """
    s = eval_states(batch, basis)
    min_h = candidate_min_h(batch, configs, basis)
    safety = -np.minimum(worst_case_min_h(batch, configs, basis), 1.0)
    comfort = np.mean(np.abs(s.jx) + np.abs(s.jy), axis=0)
    accuracy = np.mean(np.abs(s.v - v_target), axis=0)
    if desired_lane is not None:
        accuracy = accuracy + np.abs(s.py[-1] - desired_lane)
    return np.column_stack([safety, comfort, accuracy]), min_h


def evaluate_and_select(costs: np.ndarray, min_h: np.ndarray, weights: EvaluationWeights):
    """Index of the cheapest candidate with min h >= 0; (index, flagged).

    Ties go to the lowest index.  If no candidate is barrier-feasible the one
    with the largest min h is returned and the step is flagged.
    """
    costs = np.atleast_2d(costs)
    total = costs @ np.array([weights.safety, weights.comfort, weights.accuracy])
    ok = np.flatnonzero(np.asarray(min_h) >= 0.0)
    if ok.size == 0:
        return int(np.argmax(min_h)), True
    return int(ok[np.argmin(total[ok])]), False


def state_at_step(batch: ControlPointBatch, basis: BasisSet, j: int, k: int = 1) -> EgoState:
    """State of candidate j at grid step k (1-based)."""
    nu = np.array([k / basis.N])
    col = batch.column(j)
    vals = [float((basis.at(nu, o).T @ c)[0, 0]) for o, c in
            ((0, col.Cx), (0, col.Cy), (0, col.Ctheta), (1, col.Ctheta), (1, col.Cx), (1, col.Cy),
             (2, col.Cx), (2, col.Cy), (3, col.Cx), (3, col.Cy))]
    px, py, th, thd, vx, vy, ax, ay, jx, jy = vals
    return EgoState(px, py, th, thd, math.hypot(vx, vy), ax, ay, jx, jy)


def receding_horizon_step(world, ego: EgoState, config: PlannerConfig, state: PlannerState,
                          rng: np.random.Generator, v_target: float = 15.0, lanes=(0.0,),
                          desired_lane: float | None = None, bounds: StateBounds | None = None,
                          force_fallback: bool = False) -> PlanStep:
    basis = state.basis
    perceived = observe(world, ego, world.perception, rng)
    configs = build_configurations(perceived, ego, config.Nc, config.M, basis.N, basis.dt,
                                   config.ellipse, config.counts)
    if config.target_mode in ("shared", "adaptive"):
        targets = adaptive_terminal_targets(ego, lanes, v_target, basis.T, configs, config.lane_width,
                                            desired_lane, config.desired_lane_bonus,
                                            shared=config.target_mode == "shared")
    else:
        targets = sample_terminal_targets(ego, lanes, v_target, basis.T, config.Nc, config.stagger, configs,
                                          desired_lane=desired_lane)
    data = assemble(ego, configs, targets, basis, config.Ns, config.alpha_init, bounds, config.inflation)
    batch, ws, report = solve(data, config.solver, warm_start=state.prev_batch,
                              warm_duals=state.prev_ws if state.warm_duals else None,
                              prev_data=state.prev_data)
    state.prev_ws, state.prev_data = ws, data
    if force_fallback:
        report.converged = False
    inv = barrier.consensus_invariance_check(batch, configs, basis, config.Ns)
    costs, min_h = candidate_costs(batch, configs, basis, v_target, desired_lane)
    idx, flagged = evaluate_and_select(costs, min_h, config.weights)
    state.prev_batch = batch
    fallback = False
    if report.converged or state.plan is None or state.plan_age + 1 >= basis.N:
        executed = state_at_step(batch, basis, idx, 1)
        state.plan, state.plan_age = batch.column(idx), 1
    else:
        fallback = True
        state.plan_age += 1
        executed = state_at_step(state.plan, basis, 0, state.plan_age)
    executed = clamp_state(executed, config.ranges)
    return PlanStep(batch, idx, executed, report, costs, min_h, inv, flagged, fallback, targets)


# -- episodes ---------------------------------------------------------------

LOG_COLUMNS = ["t_s", "px_m", "py_m", "theta_rad", "v_mps", "ax", "ay", "jx", "jy",
               "selected_idx", "solve_ms", "converged", "min_true_dist_m", "min_h_consensus",
               "yaw_rate_radps", "min_true_scale", "fallback", "iterations", "consensus_dev_m"]
_INT_COLUMNS = {"selected_idx", "converged", "fallback", "iterations"}


@dataclass
class EpisodeLog:
    rows: list = field(default_factory=list)
    traces: list = field(default_factory=list)   # (step, iteration, block residuals dict)
    meta: dict = field(default_factory=dict)
    error: str | None = None

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([int(r[c]) if c in _INT_COLUMNS else repr(float(r[c])) for c in LOG_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "EpisodeLog":
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            rows = [{c: (int(r[c]) if c in _INT_COLUMNS else float(r[c])) for c in LOG_COLUMNS} for r in rd]
        return cls(rows)

    def write_trace(self, path):
        blocks = ["nonholonomic", "obstacle", "consensus", "bounds"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "iter"] + blocks)
            for step, it, res in self.traces:
                w.writerow([step, it] + [repr(float(res[b])) for b in blocks])


def truth_margins(world, ego: EgoState, axes=COLLISION_AXES):
    """(nearest center distance, smallest collision-ellipse scale) against ground truth."""
    if not world.obstacles:
        return DIST_CAP, DIST_CAP
    dx = np.array([o.x for o in world.obstacles]) - ego.px
    dy = np.array([o.y for o in world.obstacles]) - ego.py
    return (float(min(np.hypot(dx, dy).min(), DIST_CAP)),
            float(min(np.hypot(dx / axes[0], dy / axes[1]).min(), DIST_CAP)))


def initial_ego(scenario: Scenario) -> EgoState:
    px, py, v = scenario.ego_start
    return EgoState(px, py, 0.0, 0.0, v)


def lateral_bounds(scenario: Scenario) -> tuple:
    half = scenario.world.lane_width / 2.0
    return (float(np.min(scenario.ego_lanes)) - half, float(np.max(scenario.ego_lanes)) + half)


def run_episode(scenario: Scenario, steps: int, config: PlannerConfig,
                keep_steps: bool = False, fallback_steps=()) -> EpisodeLog:
    """Closed-loop episode; on an exception the partial log is returned with `error` set."""
    if not math.isclose(config.dt, scenario.dt):
        raise ValueError(f"planner dt {config.dt} does not match scenario dt {scenario.dt}")
    basis = build_basis(config.n, config.N, config.T)
    world = copy.deepcopy(scenario.world)
    rng = np.random.default_rng([scenario.seed, 2])
    ego = initial_ego(scenario)
    r = config.ranges
    bounds = StateBounds(px=r.px, py=lateral_bounds(scenario), ax=r.ax, ay=r.ay, jx=r.jx, jy=r.jy)
    state = PlannerState(basis)
    log = EpisodeLog(meta={"scenario": scenario.kind, "seed": scenario.seed, "steps": steps})
    if keep_steps:
        log.meta["plan_steps"] = []
    for k in range(steps):
        try:
            step = receding_horizon_step(world, ego, config, state, rng, scenario.v_target,
                                         scenario.ego_lanes, scenario.desired_lane, bounds,
                                         force_fallback=k in fallback_steps)
        except Exception as exc:  # keep what we have
            log.error = f"step {k}: {type(exc).__name__}: {exc}"
            break
        ego = step.executed
        step_world(world, scenario.dt, rng=rng, ego=ego)
        dist, scale = truth_margins(world, ego)
        rep = step.report
        log.rows.append({
            "t_s": world.t, "px_m": ego.px, "py_m": ego.py, "theta_rad": ego.theta, "v_mps": ego.v,
            "ax": ego.ax, "ay": ego.ay, "jx": ego.jx, "jy": ego.jy,
            "selected_idx": step.selected, "solve_ms": rep.wall_time, "converged": int(rep.converged),
            "min_true_dist_m": dist, "min_h_consensus": float(min(step.invariance.min_h, DIST_CAP)),
            "yaw_rate_radps": ego.theta_dot, "min_true_scale": scale, "fallback": int(step.fallback),
            "iterations": rep.iterations, "consensus_dev_m": step.invariance.position_deviation,
        })
        log.traces.extend((k, i + 1, res) for i, res in enumerate(rep.primal_residuals))
        if keep_steps:
            log.meta["plan_steps"].append(step)
    return log


@dataclass
class MetricsReport:
    steps: int
    collision_rate: float
    mean_min_dist_m: float
    speed_mae_mps: float
    mean_abs_ax: float
    mean_abs_ay: float
    mean_abs_jx: float
    mean_abs_jy: float
    max_abs_jx: float
    max_abs_jy: float
    mean_abs_yaw_rate: float
    mean_solve_ms: float
    max_solve_ms: float
    converged_rate: float
    fallback_steps: int
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(log: EpisodeLog, v_target: float = 15.0) -> MetricsReport:
    if len(log) == 0:
        raise ValueError("cannot compute metrics of an empty log")
    col = log.column
    return MetricsReport(
        steps=len(log),
        collision_rate=float(np.mean(col("min_true_scale") < 1.0)),
        mean_min_dist_m=float(np.mean(col("min_true_dist_m"))),
        speed_mae_mps=float(np.mean(np.abs(col("v_mps") - v_target))),
        mean_abs_ax=float(np.mean(np.abs(col("ax")))),
        mean_abs_ay=float(np.mean(np.abs(col("ay")))),
        mean_abs_jx=float(np.mean(np.abs(col("jx")))),
        mean_abs_jy=float(np.mean(np.abs(col("jy")))),
        max_abs_jx=float(np.max(np.abs(col("jx")))),
        max_abs_jy=float(np.max(np.abs(col("jy")))),
        mean_abs_yaw_rate=float(np.mean(np.abs(col("yaw_rate_radps")))),
        mean_solve_ms=float(np.mean(col("solve_ms"))),
        max_solve_ms=float(np.max(col("solve_ms"))),
        converged_rate=float(np.mean(col("converged"))),
        fallback_steps=int(np.sum(col("fallback"))),
        meta=dict(log.meta) if "plan_steps" not in log.meta else
        {k: v for k, v in log.meta.items() if k != "plan_steps"},
    )
