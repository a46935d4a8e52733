"""
Ground-truth traffic simulation, perception model and obstacle configurations.

Four world modes are supported: ``constant-velocity``, ``idm``, ``replay`` and
``static-field``.  All randomness is drawn from a single numpy Generator per
episode, and every random draw is made unconditionally (e.g. noise is sampled
even when its scale is zero) so the stream does not depend on geometry.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .barrier import ellipse_schedule

WORLD_MODES = ("constant-velocity", "idm", "replay", "static-field")


@dataclass
class Obstacle:
    id: int
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    length: float = 4.8
    width: float = 1.9
    lane: int = -1
    s_e: float = 35.0         # existence-certainty distance, drawn once
    v_desired: float = 15.0   # IDM desired speed

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.vx, self.vy)):
            raise ValueError(f"obstacle {self.id} has non-finite kinematics")


@dataclass
class PerceptionModel:
    sigma_px_bar: float = 1.0
    sigma_py_bar: float = 0.5
    sigma_vx_bar: float = 0.5
    sigma_vy_bar: float = 0.1
    s_d: float = 15.0
    s_e_mean: float = 35.0
    s_e_std: float = 10.0
    rear_range: float = 10.0
    lateral_range: float = 10.0
    front_range: float = 80.0
    threshold: bool = True   # zero the noise inside s_d

    def __post_init__(self):
        if min(self.sigma_px_bar, self.sigma_py_bar, self.sigma_vx_bar, self.sigma_vy_bar) < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.s_d <= 0:
            raise ValueError("s_d must be positive")
        if self.s_e_std < 0 or min(self.rear_range, self.lateral_range, self.front_range) < 0:
            raise ValueError("perception ranges must be nonnegative")


def noise_sigma(sigma_bar, s_dis, s_d: float = 15.0, raw: bool = False):
    """Distance-dependent noise scale ``sigma_bar / max(10 / (s + 0.1), 1)``.

    With ``raw=False`` the scale is zero closer than `s_d` (fully observed).
    """
    s_dis = np.asarray(s_dis, dtype=float)
    if np.any(s_dis < 0):
        raise ValueError("distance must be nonnegative")
    sigma = sigma_bar / np.maximum(10.0 / (s_dis + 0.1), 1.0)
    if not raw:
        sigma = np.where(s_dis < s_d, 0.0, sigma)
    return sigma if sigma.ndim else float(sigma)


def sample_existence_distance(model: PerceptionModel, rng: np.random.Generator) -> float:
    return max(model.s_d, float(rng.normal(model.s_e_mean, model.s_e_std)))


def existence_probability(s_dis: float, s_e: float) -> float:
    """1 inside s_e, linear ramp down to 0 at 2 s_e."""
    if s_dis < s_e:
        return 1.0
    return float(np.clip(2.0 - s_dis / s_e, 0.0, 1.0))


def observe(world, ego, model: PerceptionModel, rng: np.random.Generator) -> list:
    """Noisy, existence-filtered snapshot of the obstacles visible from the ego."""
    out = []
    for ob in sorted(world.obstacles, key=lambda o: o.id):
        dx, dy = ob.x - ego.px, ob.y - ego.py
        if dx < -model.rear_range or dx > model.front_range or abs(dy) > model.lateral_range:
            continue
        s = math.hypot(dx, dy)
        u = rng.random()
        z = rng.standard_normal(4)
        if u >= existence_probability(s, ob.s_e):
            continue
        sig = [noise_sigma(sb, s, model.s_d, raw=not model.threshold) for sb in
               (model.sigma_px_bar, model.sigma_py_bar, model.sigma_vx_bar, model.sigma_vy_bar)]
        out.append(replace(ob, x=ob.x + sig[0] * z[0], y=ob.y + sig[1] * z[1],
                           vx=ob.vx + sig[2] * z[2], vy=ob.vy + sig[3] * z[3]))
    return out


def predict_constant_velocity(obstacle: Obstacle, N: int, dt: float):
    """Predicted positions ``o + k dt v`` for k = 1..N."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k = np.arange(1, N + 1) * dt
    return obstacle.x + k * obstacle.vx, obstacle.y + k * obstacle.vy


@dataclass
class IdmParams:
    v0: float = 15.0
    time_headway: float = 1.5
    s0: float = 10.0
    a_max: float = 1.5
    b_comf: float = 2.0
    delta: float = 4.0
    noise_var: float = 0.2
    accel_range: tuple = (-4.0, 3.0)

    def __post_init__(self):
        if min(self.v0, self.time_headway, self.s0, self.a_max, self.b_comf, self.delta) <= 0:
            raise ValueError("IDM parameters must be positive")
        if self.noise_var < 0:
            raise ValueError("noise variance must be nonnegative")


def idm_accel_deterministic(gap: float, v: float, v_lead: float, p: IdmParams) -> float:
    s_star = p.s0 + max(0.0, v * p.time_headway + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b_comf)))
    return p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / gap) ** 2)


def idm_accel(gap: float, v: float, v_lead: float, params: IdmParams,
              rng: np.random.Generator | None = None) -> float:
    """Standard IDM acceleration plus white noise, clamped to the acceleration range.

    A nonpositive gap returns the emergency (minimum) acceleration.  The noise
    draw happens before the gap check so the random stream is geometry-free.
    """
    noise = math.sqrt(params.noise_var) * float(rng.standard_normal()) if rng is not None else 0.0
    if gap <= 0:
        return params.accel_range[0]
    a = idm_accel_deterministic(gap, v, v_lead, params) + noise
    return float(np.clip(a, *params.accel_range))


@dataclass
class ObstacleConfiguration:
    """One obstacle hypothesis, padded with virtual entries to M slots."""
    obstacles: list       # length M, None for virtual slots
    mask: np.ndarray      # M bool, real entries first
    ox: np.ndarray        # N x M predicted positions
    oy: np.ndarray
    lx: np.ndarray        # N x M ellipse axes, zero where masked
    ly: np.ndarray

    @property
    def M(self) -> int:
        return self.mask.size

    @property
    def step_mask(self) -> np.ndarray:
        return np.broadcast_to(self.mask, self.ox.shape)

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def count_ladder(Nc: int, M: int, n_perceived: int, counts=None) -> list:
    """Obstacle counts per candidate, nondecreasing and capped at the perceived total."""
    if counts is None:
        if Nc == 5 and M >= 5:
            counts = [2, 3, 3, 4, 5]
        else:
            counts = np.floor(np.linspace(max(1, M - 3), M, Nc)).astype(int).tolist()
    counts = list(counts)
    if len(counts) != Nc:
        raise ValueError(f"count ladder has {len(counts)} entries for {Nc} candidates")
    if max(counts) > M:
        raise ValueError(f"count ladder exceeds M={M}")
    return [min(int(c), n_perceived) for c in counts]


@dataclass
class EllipseParams:
    lx_max: float = 7.2
    lx_min: float = 6.0
    ly_max: float = 5.4
    ly_min: float = 4.5


def build_configurations(perceived, ego, Nc: int, M: int, N: int = 40, dt: float = 0.1,
                         ellipse: EllipseParams | None = None, counts=None) -> list:
    """Candidate j sees its k_j nearest perceived obstacles; the rest are virtual."""
    if Nc < 1:
        raise ValueError("need at least one candidate")
    ellipse = ellipse or EllipseParams()
    order = sorted(perceived, key=lambda o: (math.hypot(o.x - ego.px, o.y - ego.py), o.id))
    ks = count_ladder(Nc, M, len(order), counts)
    preds = [predict_constant_velocity(o, N, dt) for o in order[:max(ks, default=0)]]
    out = []
    for k in ks:
        mask = np.zeros(M, dtype=bool)
        mask[:k] = True
        ox = np.zeros((N, M))
        oy = np.zeros((N, M))
        for i in range(k):
            ox[:, i], oy[:, i] = preds[i]
        es = ellipse_schedule(ellipse.lx_max, ellipse.lx_min, ellipse.ly_max, ellipse.ly_min, N, mask)
        out.append(ObstacleConfiguration(list(order[:k]) + [None] * (M - k), mask, ox, oy, es.lx, es.ly))
    return out


# -- replay logs ------------------------------------------------------------

class ReplayParseError(ValueError):
    pass


class FrameGapError(ValueError):
    pass


REPLAY_COLUMNS = ["vehicle_id", "frame", "x_m", "y_m", "vx_mps", "vy_mps"]


@dataclass
class ReplayTrack:
    frames: np.ndarray  # int, contiguous
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray


@dataclass
class ReplayLog:
    frame_rate: float
    tracks: dict  # vehicle id -> ReplayTrack

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate

    @property
    def n_frames(self) -> int:
        return 1 + max(int(t.frames[-1]) for t in self.tracks.values()) if self.tracks else 0

    def states_at(self, t: float) -> list:
        """Linearly interpolated obstacle states at time t (frame 0 at t = 0)."""
        f = t * self.frame_rate
        out = []
        for vid in sorted(self.tracks):
            tr = self.tracks[vid]
            if f < tr.frames[0] - 1e-9 or f > tr.frames[-1] + 1e-9:
                continue
            fr = tr.frames.astype(float)
            out.append(Obstacle(vid, float(np.interp(f, fr, tr.x)), float(np.interp(f, fr, tr.y)),
                                float(np.interp(f, fr, tr.vx)), float(np.interp(f, fr, tr.vy))))
        return out

    def resample(self, dt: float) -> "ReplayLog":
        """Same traffic on a new frame grid of spacing dt."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        rate = 1.0 / dt
        tracks = {}
        for vid, tr in self.tracks.items():
            t0, t1 = tr.frames[0] / self.frame_rate, tr.frames[-1] / self.frame_rate
            new = np.arange(math.ceil(t0 * rate - 1e-9), math.floor(t1 * rate + 1e-9) + 1)
            if new.size == 0:
                continue
            src = tr.frames / self.frame_rate
            tq = new / rate
            tracks[vid] = ReplayTrack(new, *(np.interp(tq, src, a) for a in (tr.x, tr.y, tr.vx, tr.vy)))
        return ReplayLog(rate, tracks)


def load_replay(path) -> ReplayLog:
    """Parse a replay CSV: a ``# frame_rate_hz=R`` line, a header row, then data rows."""
    rows = {}
    rate = None
    header_seen = False
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                key, _, val = text[1:].strip().partition("=")
                if key.strip() == "frame_rate_hz":
                    try:
                        rate = float(val)
                    except ValueError:
                        raise ReplayParseError(f"line {lineno}: bad frame rate {val!r}") from None
                    if not rate > 0:
                        raise ReplayParseError(f"line {lineno}: frame rate must be positive")
                continue
            fields_ = next(csv.reader([text]))
            if not header_seen:
                if [f.strip() for f in fields_] != REPLAY_COLUMNS:
                    raise ReplayParseError(f"line {lineno}: expected header {','.join(REPLAY_COLUMNS)}")
                header_seen = True
                continue
            if len(fields_) != len(REPLAY_COLUMNS):
                raise ReplayParseError(f"line {lineno}: expected {len(REPLAY_COLUMNS)} fields, got {len(fields_)}")
            try:
                vid, frame = int(fields_[0]), int(fields_[1])
                vals = [float(v) for v in fields_[2:]]
            except ValueError as exc:
                raise ReplayParseError(f"line {lineno}: {exc}") from None
            if frame < 0 or not all(math.isfinite(v) for v in vals):
                raise ReplayParseError(f"line {lineno}: invalid frame or non-finite value")
            rows.setdefault(vid, []).append((frame, *vals))
    if rate is None:
        raise ReplayParseError("missing '# frame_rate_hz=' header line")
    if not header_seen:
        raise ReplayParseError("missing column header")
    tracks = {}
    for vid, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        a = np.array(recs)
        frames = a[:, 0].astype(int)
        if np.any(np.diff(frames) != 1):
            bad = int(frames[np.argmax(np.diff(frames) != 1)])
            raise FrameGapError(f"vehicle {vid}: frames not contiguous after frame {bad}")
        tracks[vid] = ReplayTrack(frames, a[:, 1], a[:, 2], a[:, 3], a[:, 4])
    return ReplayLog(rate, tracks)


def write_replay(path, log: ReplayLog):
    with open(path, "w", newline="") as fh:
        fh.write(f"# frame_rate_hz={log.frame_rate!r}\n")
        w = csv.writer(fh)
        w.writerow(REPLAY_COLUMNS)
        for vid in sorted(log.tracks):
            tr = log.tracks[vid]
            for i, f in enumerate(tr.frames):
                w.writerow([vid, int(f), repr(float(tr.x[i])), repr(float(tr.y[i])),
                            repr(float(tr.vx[i])), repr(float(tr.vy[i]))])


# -- world ------------------------------------------------------------------

def lane_centers(n_lanes: int = 5, width: float = 3.6) -> np.ndarray:
    return (np.arange(n_lanes) - (n_lanes - 1) / 2.0) * width


@dataclass
class StaticFieldParams:
    rate_per_s: float = 1.0           # 60 obstacles per minute
    spawn_ahead: tuple = (80.0, 100.0)
    corridor_segment: float = 120.0   # m between corridor shifts
    shift_prob: float = 1.0
    transition: float = 45.0          # m either side of a shift kept clear in both lanes
    corridor_lanes: tuple = (0, 1, 2, 3)
    cull_behind: float = 60.0


@dataclass
class World:
    mode: str
    obstacles: list = field(default_factory=list)
    t: float = 0.0
    lanes: np.ndarray = field(default_factory=lane_centers)
    lane_width: float = 3.6
    perception: PerceptionModel = field(default_factory=PerceptionModel)
    idm: IdmParams = field(default_factory=IdmParams)
    replay: ReplayLog | None = None
    static: StaticFieldParams = field(default_factory=StaticFieldParams)
    next_id: int = 0
    spawned: int = 0
    corridor: list = field(default_factory=list)  # [(x_start, lane index)]
    desired_speed_range: tuple = (6.0, 22.0)
    existence: dict = field(default_factory=dict)  # replay id -> s_e

    def __post_init__(self):
        if self.mode not in WORLD_MODES:
            raise ValueError(f"world mode must be one of {WORLD_MODES}, got {self.mode!r}")

    def lane_of(self, y: float) -> int:
        return int(np.argmin(np.abs(self.lanes - y)))

    def new_obstacle(self, rng, **kw) -> Obstacle:
        ob = Obstacle(self.next_id, s_e=sample_existence_distance(self.perception, rng), **kw)
        self.next_id += 1
        return ob


def _leader(world: World, ob: Obstacle, ego):
    """Nearest vehicle ahead in the same lane (ego included); returns (gap, speed)."""
    half = world.lane_width / 2.0
    best = (math.inf, ob.vx)
    for other in world.obstacles:
        if other is ob or abs(other.y - ob.y) >= half:
            continue
        gap = other.x - ob.x - 0.5 * (other.length + ob.length)
        if other.x > ob.x and gap < best[0]:
            best = (gap, other.vx)
    if ego is not None and abs(ego.py - ob.y) < half and ego.px > ob.x:
        gap = ego.px - ob.x - ob.length
        if gap < best[0]:
            best = (gap, ego.v)
    return best


def _step_idm(world: World, dt: float, rng, ego):
    accels = []
    for ob in world.obstacles:  # simultaneous update
        gap, v_lead = _leader(world, ob, ego)
        p = replace(world.idm, v0=ob.v_desired)
        accels.append(idm_accel(gap, ob.vx, v_lead, p, rng) if math.isfinite(gap)
                      else idm_accel(1e9, ob.vx, ob.vx, p, rng))
    for ob, a in zip(world.obstacles, accels):
        v_new = max(0.0, ob.vx + a * dt)
        ob.x += 0.5 * (ob.vx + v_new) * dt
        ob.vx = v_new
        ob.vy = 0.0
    if ego is not None:
        _recycle_idm(world, rng, ego)


def _recycle_idm(world: World, rng, ego, behind: float = 120.0, ahead: float = 280.0):
    """Keep traffic around the ego: vehicles leaving the window re-enter at the other end."""
    for ob in world.obstacles:
        if ob.x < ego.px - behind:
            ob.x = _free_slot(world, ob, ego.px + ahead - 40.0, ego.px + ahead)
        elif ob.x > ego.px + ahead:
            ob.x = _free_slot(world, ob, ego.px - behind, ego.px - behind + 40.0)
        else:
            continue
        ob.vx = min(ob.vx, ob.v_desired)
        ob.s_e = sample_existence_distance(world.perception, rng)


def _free_slot(world: World, ob: Obstacle, lo: float, hi: float) -> float:
    """Largest-clearance position in [lo, hi] within the obstacle's lane."""
    xs = sorted(o.x for o in world.obstacles if o is not ob and abs(o.y - ob.y) < world.lane_width / 2)
    cands = np.linspace(lo, hi, 9)
    if not xs:
        return float(cands[-1])
    clear = [min(abs(c - x) for x in xs) for c in cands]
    return float(cands[int(np.argmax(clear))])


def corridor_lane(world: World, x: float) -> int:
    lane = world.corridor[0][1]
    for x0, ln in world.corridor:
        if x >= x0:
            lane = ln
    return lane


def _extend_corridor(world: World, x: float, rng):
    sp = world.static
    lanes = sp.corridor_lanes
    while world.corridor[-1][0] < x + sp.corridor_segment:
        x0, ln = world.corridor[-1]
        i = lanes.index(ln)
        step = int(rng.choice([-1, 1]))
        if not 0 <= i + step < len(lanes):
            step = -step
        shift = rng.random() < sp.shift_prob
        world.corridor.append((x0 + sp.corridor_segment, lanes[i + step] if shift else ln))


def protected_lanes(world: World, x: float) -> set:
    """Corridor lanes that must stay clear around x (both lanes near a shift)."""
    sp = world.static
    return {ln for x0, ln in world.corridor
            if x0 - sp.transition <= x and (x < _next_start(world, x0) + sp.transition)}


def _next_start(world: World, x0: float) -> float:
    for xs, _ in world.corridor:
        if xs > x0:
            return xs
    return math.inf


def allowed_spawn_lanes(world: World, x: float) -> list:
    prot = protected_lanes(world, x)
    return [i for i in range(len(world.lanes)) if all(abs(i - p) >= 2 for p in prot)]


def _step_static(world: World, dt: float, rng, ego):
    sp = world.static
    n_new = int(rng.poisson(sp.rate_per_s * dt))
    ref = ego.px if ego is not None else 0.0
    if not world.corridor:
        lane0 = world.lane_of(ego.py) if ego is not None else sp.corridor_lanes[0]
        lane0 = min(sp.corridor_lanes, key=lambda ln: abs(ln - lane0))
        world.corridor = [(-math.inf, lane0), (ref, lane0)]
    for _ in range(n_new):
        x = ref + float(rng.uniform(*sp.spawn_ahead))
        _extend_corridor(world, x, rng)
        allowed = allowed_spawn_lanes(world, x)
        lane = allowed[int(rng.integers(len(allowed)))]
        world.obstacles.append(world.new_obstacle(rng, x=x, y=float(world.lanes[lane]), lane=lane))
        world.spawned += 1
    if ego is not None:
        world.obstacles = [o for o in world.obstacles if o.x > ego.px - sp.cull_behind]


def _assign_existence(world: World, rng):
    """Replayed vehicles keep one existence distance for their whole track."""
    for ob in world.obstacles:
        if ob.id not in world.existence:
            world.existence[ob.id] = (sample_existence_distance(world.perception, rng)
                                      if rng is not None else world.perception.s_e_mean)
        ob.s_e = world.existence[ob.id]


def step_world(world: World, dt: float, mode: str | None = None, rng=None, ego=None) -> World:
    """Advance the surrounding vehicles by dt seconds (in place); returns the world."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    mode = mode or world.mode
    if mode == "constant-velocity":
        for ob in world.obstacles:
            ob.x += ob.vx * dt
            ob.y += ob.vy * dt
    elif mode == "idm":
        _step_idm(world, dt, rng, ego)
    elif mode == "replay":
        if world.replay is None:
            raise ValueError("replay mode needs a replay log")
        world.obstacles = world.replay.states_at(world.t + dt)
        _assign_existence(world, rng)
    elif mode == "static-field":
        _step_static(world, dt, rng, ego)
    else:
        raise ValueError(f"unknown world mode {mode!r}")
    world.t += dt
    return world


# -- scenario fixtures ------------------------------------------------------

@dataclass
class Scenario:
    kind: str
    world: World
    ego_start: tuple          # (px, py, v)
    v_target: float
    ego_lanes: np.ndarray     # lane centers the ego may target
    dt: float
    desired_lane: float | None = None
    seed: int = 0


def _populate_lanes(world: World, rng, ego_xy, v_range, lanes_idx, spacing=(25.0, 45.0),
                    span=(-100.0, 260.0), ego_clear=25.0):
    for li in lanes_idx:
        y = float(world.lanes[li])
        x = ego_xy[0] + span[0] + float(rng.uniform(0.0, spacing[0]))
        while x < ego_xy[0] + span[1]:
            v_des = float(rng.uniform(*v_range))
            if abs(y - ego_xy[1]) > world.lane_width / 2 or abs(x - ego_xy[0]) > ego_clear:
                world.obstacles.append(world.new_obstacle(rng, x=x, y=y, vx=v_des, lane=li, v_desired=v_des))
            x += float(rng.uniform(*spacing))


def make_scenario(kind: str, seed: int = 0, perception: PerceptionModel | None = None,
                  idm: IdmParams | None = None, replay: ReplayLog | None = None,
                  lane_width: float = 3.6, n_lanes: int = 5, v_target: float = 15.0,
                  dt: float = 0.1) -> Scenario:
    """Build one of the evaluation scenarios with a seeded initial world."""
    rng = np.random.default_rng([seed, 1])
    perception = perception or PerceptionModel()
    idm = idm or IdmParams()
    lanes = lane_centers(n_lanes, lane_width)
    if kind == "static-field":
        w = World("static-field", lanes=lanes, lane_width=lane_width, perception=perception, idm=idm)
        return Scenario(kind, w, (-20.0, -6.0, v_target), v_target, lanes[:4], dt, seed=seed)
    if kind == "idm-traffic":
        w = World("idm", lanes=lanes, lane_width=lane_width, perception=perception, idm=idm,
                  desired_speed_range=(6.0, 22.0))
        # every other lane is occupied: the collision ellipse is wider than a
        # lane, so traffic in adjacent lanes would overtake the ego unavoidably
        ego_y = float(lanes[n_lanes // 2])
        _populate_lanes(w, rng, (0.0, ego_y), w.desired_speed_range,
                        range(n_lanes // 2 % 2, n_lanes, 2))
        return Scenario(kind, w, (0.0, ego_y, v_target), v_target, lanes, dt, seed=seed)
    if kind == "lane-change":
        w = World("idm", lanes=lanes, lane_width=lane_width, perception=perception, idm=idm,
                  desired_speed_range=(8.5, 18.0))
        ego_y = 0.0
        target = float(lanes[n_lanes // 2 - 1])
        _populate_lanes(w, rng, (15.0, ego_y), w.desired_speed_range,
                        [n_lanes // 2 - 1, n_lanes // 2], spacing=(35.0, 55.0))
        return Scenario(kind, w, (15.0, ego_y, v_target), v_target,
                        np.array([target, ego_y]), dt, desired_lane=target, seed=seed)
    if kind == "replay":
        if replay is None:
            raise ValueError("replay scenario needs a replay log")
        log = replay.resample(dt) if not math.isclose(replay.dt, dt) else replay
        w = World("replay", lanes=lanes, lane_width=lane_width, perception=perception, replay=log)
        w.obstacles = log.states_at(0.0)
        _assign_existence(w, rng)
        return Scenario(kind, w, (0.0, 0.0, v_target), v_target, lanes, dt, seed=seed)
    raise ValueError(f"unknown scenario kind {kind!r}")
