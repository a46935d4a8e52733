import numpy as np
import pytest

from cpto.barrier import ellipse_schedule
from cpto.bezier import build_basis
from cpto.planner import (LOG_COLUMNS, EgoState, EpisodeLog, EvaluationWeights, PlannerConfig, PlannerState,
                          adaptive_terminal_targets, compute_metrics, evaluate_and_select, receding_horizon_step,
                          run_episode, sample_terminal_targets, state_at_step)
from cpto.world import (Obstacle, ObstacleConfiguration, ReplayLog, ReplayTrack, World, lane_centers,
                        make_scenario)

LANES3 = (-3.6, 0.0, 3.6)
# the ellipse is wider than a lane, so only a lane two over escapes a blocker
WIDE = (0.0, 7.2)


def config_with(obstacles, N=40, M=3, dt=0.1):
    mask = np.zeros(M, bool)
    mask[:len(obstacles)] = True
    ox, oy = np.zeros((N, M)), np.zeros((N, M))
    k = np.arange(1, N + 1) * dt
    for i, o in enumerate(obstacles):
        ox[:, i], oy[:, i] = o.x + k * o.vx, o.y + k * o.vy
    es = ellipse_schedule(7.2, 6.0, 5.4, 4.5, N, mask)
    return ObstacleConfiguration(list(obstacles) + [None] * (M - len(obstacles)), mask, ox, oy, es.lx, es.ly)


# -- terminal targets ---------------------------------------------------------------

def test_targets_single_lane():
    PxN, PyN = sample_terminal_targets(EgoState(10.0, 0.0), [0.0], 15.0, 4.0, 1)
    assert PxN[0] == pytest.approx(70.0) and PyN[0] == 0.0


def test_targets_cycle_over_lanes():
    PxN, PyN = sample_terminal_targets(EgoState(0.0, 0.0), LANES3, 15.0, 4.0, 5)
    assert sorted(set(PyN)) == sorted(LANES3)
    assert list(PyN[:3]) == [0.0, -3.6, 3.6] and PyN[3] == PyN[0]


def test_targets_cycle_desired_first():
    _, PyN = sample_terminal_targets(EgoState(0.0, 0.0), LANES3, 15.0, 4.0, 3, desired_lane=3.6)
    assert PyN[0] == 3.6


def test_targets_zero_speed():
    PxN, _ = sample_terminal_targets(EgoState(5.0, 0.0), [0.0], 0.0, 4.0, 3)
    np.testing.assert_allclose(PxN, 5.0)


def test_terminal_cleared_behind_slow_leader():
    leader = Obstacle(0, 30.0, 0.0, 5.0, 0.0)
    cfg = config_with([leader])
    PxN, _ = sample_terminal_targets(EgoState(0.0, 0.0, v=15.0), [0.0], 15.0, 4.0, 1, configs=[cfg])
    # leader ends at 50 m; the target stops behind its ellipse and a 1 s headway
    assert PxN[0] <= 50.0 - 6.0 - 5.0 + 1e-6
    assert PxN[0] >= 0.0


def test_shared_targets_identical_and_avoid_blocked_lane():
    ego = EgoState(0.0, 0.0, v=15.0)
    blocker = Obstacle(0, 25.0, 0.0, 0.0, 0.0)
    sparse, rich = config_with([]), config_with([blocker])
    PxN, PyN = adaptive_terminal_targets(ego, WIDE, 15.0, 4.0, [sparse, rich], shared=True)
    assert PyN[0] == PyN[1] and PxN[0] == PxN[1]
    assert PyN[0] != 0.0


def test_adaptive_targets_follow_own_hypothesis():
    ego = EgoState(0.0, 0.0, v=15.0)
    blocker = Obstacle(0, 25.0, 0.0, 0.0, 0.0)
    PxN, PyN = adaptive_terminal_targets(ego, WIDE, 15.0, 4.0, [config_with([]), config_with([blocker])],
                                         shared=False)
    assert PyN[0] == 0.0 and PyN[1] != 0.0


def test_desired_lane_bonus():
    ego = EgoState(0.0, 0.0, v=15.0)
    _, PyN = adaptive_terminal_targets(ego, LANES3, 15.0, 4.0, [config_with([])], desired_lane=-3.6)
    assert PyN[0] == -3.6


# -- selection --------------------------------------------------------------------

def test_select_examples():
    w = EvaluationWeights()
    assert evaluate_and_select(np.array([[0.1, 0.2, 0.3]]), np.array([0.5]), w) == (0, False)
    costs = np.ones((3, 3))
    assert evaluate_and_select(costs, np.array([1.0, 1.0, 1.0]), w) == (0, False)
    costs[0] -= 0.5   # cheapest, but infeasible
    assert evaluate_and_select(costs, np.array([-0.1, 1.0, 1.0]), w) == (1, False)


def test_select_flags_when_nothing_feasible():
    idx, flagged = evaluate_and_select(np.zeros((3, 3)), np.array([-0.3, -0.1, -0.2]), EvaluationWeights())
    assert (idx, flagged) == (1, True)


def test_weights_validation():
    with pytest.raises(ValueError):
        EvaluationWeights(0.0, 0.0, 0.0)


# -- one planning cycle ---------------------------------------------------------------

def _empty_world():
    return World("constant-velocity", lanes=lane_centers())


def test_empty_world_keeps_target_speed():
    cfg = PlannerConfig()
    state = PlannerState(build_basis(cfg.n, cfg.N, cfg.T))
    ego = EgoState(0.0, 0.0, v=15.0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        step = receding_horizon_step(_empty_world(), ego, cfg, state, rng, 15.0, lanes=(0.0,))
        ego = step.executed
        assert abs(ego.v - 15.0) <= 0.1


def test_executed_state_independent_of_selection():
    cfg = PlannerConfig()
    basis = build_basis(cfg.n, cfg.N, cfg.T)
    state = PlannerState(basis)
    w = World("constant-velocity", lanes=lane_centers(),
              obstacles=[Obstacle(0, 40.0, 3.6, 8.0, s_e=1e3), Obstacle(1, 60.0, 0.0, 10.0, s_e=1e3),
                         Obstacle(2, 25.0, -3.6, 12.0, s_e=1e3)])
    step = receding_horizon_step(w, EgoState(0.0, 0.0, v=15.0), cfg, state, np.random.default_rng(1), 15.0,
                                 lanes=lane_centers())
    assert step.report.converged
    first = [state_at_step(step.batch, basis, j, 1) for j in range(cfg.Nc)]
    xs, ys = np.array([s.px for s in first]), np.array([s.py for s in first])
    assert np.hypot(np.ptp(xs), np.ptp(ys)) <= 1e-2


def test_forced_fallback_uses_previous_plan():
    sc = make_scenario("static-field", 0)
    log = run_episode(sc, 6, PlannerConfig(), keep_steps=True, fallback_steps={3, 4})
    fb = log.column("fallback")
    assert list(fb) == [0, 0, 0, 1, 1, 0]
    steps = log.meta["plan_steps"]
    assert steps[3].fallback and not steps[3].report.converged


# -- episodes and metrics -----------------------------------------------------------------

def test_zero_steps_empty_log():
    log = run_episode(make_scenario("static-field", 0), 0, PlannerConfig())
    assert len(log) == 0 and log.error is None
    with pytest.raises(ValueError):
        compute_metrics(log)


def test_600_steps_is_60_seconds():
    log = run_episode(make_scenario("static-field", 1), 600, PlannerConfig())
    assert log.error is None
    assert log.rows[-1]["t_s"] == pytest.approx(60.0)


def test_replay_450_steps_at_12_5_hz():
    frames = np.arange(600)
    log = ReplayLog(12.5, {5: ReplayTrack(frames, 200.0 + 0.8 * frames, 3.6 + 0 * frames, 10.0 + 0 * frames,
                                          0.0 * frames)})
    sc = make_scenario("replay", 0, replay=log, dt=0.08)
    ep = run_episode(sc, 450, PlannerConfig(N=50, T=4.0))
    assert ep.error is None
    assert ep.rows[-1]["t_s"] == pytest.approx(36.0)


def test_planner_dt_must_match_scenario():
    with pytest.raises(ValueError):
        run_episode(make_scenario("static-field", 0, dt=0.08), 1, PlannerConfig())


def _rows(n, **over):
    base = {c: 0.0 for c in LOG_COLUMNS}
    base.update(min_true_dist_m=50.0, min_true_scale=10.0, converged=1, v_mps=15.0)
    rows = []
    for k in range(n):
        r = dict(base, t_s=0.1 * (k + 1))
        r.update({key: (v(k) if callable(v) else v) for key, v in over.items()})
        rows.append(r)
    return rows


def test_metrics_constant_speed():
    m = compute_metrics(EpisodeLog(_rows(50, v_mps=14.0)), v_target=15.0)
    assert m.collision_rate == 0.0 and m.speed_mae_mps == pytest.approx(1.0)


def test_metrics_single_collision_step():
    m = compute_metrics(EpisodeLog(_rows(200, min_true_scale=lambda k: 0.5 if k == 17 else 5.0)))
    assert m.collision_rate == pytest.approx(0.005)


def test_metrics_jerk_matches_finite_difference():
    dt, c = 0.1, 0.3
    # v = c t^2 along x: a = 2 c t, j = 2 c
    rows = _rows(100, v_mps=lambda k: c * (dt * k) ** 2, ax=lambda k: 2 * c * dt * k, jx=2 * c)
    m = compute_metrics(EpisodeLog(rows))
    v = np.array([r["v_mps"] for r in rows])
    fd = np.diff(v, 2) / dt ** 2
    assert m.mean_abs_jx == pytest.approx(np.mean(np.abs(fd)), abs=1e-6)
    assert m.max_abs_jx == pytest.approx(np.max(np.abs(fd)), abs=1e-6)


def test_log_csv_roundtrip(tmp_path):
    log = run_episode(make_scenario("idm-traffic", 0), 5, PlannerConfig())
    log.to_csv(tmp_path / "log.csv")
    back = EpisodeLog.from_csv(tmp_path / "log.csv")
    assert back.rows == log.rows
    header = (tmp_path / "log.csv").read_text().splitlines()[0].split(",")
    assert header[:14] == ["t_s", "px_m", "py_m", "theta_rad", "v_mps", "ax", "ay", "jx", "jy", "selected_idx",
                           "solve_ms", "converged", "min_true_dist_m", "min_h_consensus"]
    log.write_trace(tmp_path / "trace.csv")
    assert (tmp_path / "trace.csv").read_text().startswith("step,iter,nonholonomic,obstacle,consensus,bounds")


def test_episode_deterministic():
    a = run_episode(make_scenario("idm-traffic", 2), 8, PlannerConfig())
    b = run_episode(make_scenario("idm-traffic", 2), 8, PlannerConfig())
    strip = lambda rows: [{k: v for k, v in r.items() if k != "solve_ms"} for r in rows]
    assert strip(a.rows) == strip(b.rows)
