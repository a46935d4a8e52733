"""
Run configuration: a YAML document mapped onto nested dataclasses.

Every section is optional; omitted keys take their defaults.  Unknown keys and
out-of-range values raise ``ConfigError`` naming the dotted key path, e.g.
``ranges.v``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .planner import EvaluationWeights, PlannerConfig, Ranges
from .solver import SolverConfig
from .world import EllipseParams, IdmParams, PerceptionModel

SCENARIOS = ("static-field", "idm-traffic", "replay", "lane-change")

# hard limits: configured ranges may narrow these but never widen them
LIMITS = Ranges()


class ConfigError(ValueError):
    pass


@dataclass
class VehicleParams:
    # recorded for completeness; the point-mass curve model does not use them
    l_f: float = 1.06
    l_r: float = 1.85


@dataclass
class RunConfig:
    scenario: str = "static-field"
    seeds: list = field(default_factory=lambda: [0])
    steps: int = 200
    out: str = "runs"
    workers: int = 1
    replay_path: str | None = None
    v_target: float = 15.0
    n_lanes: int = 5
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    perception: PerceptionModel = field(default_factory=PerceptionModel)
    ranges: Ranges = field(default_factory=Ranges)
    ellipse: EllipseParams = field(default_factory=EllipseParams)
    weights: EvaluationWeights = field(default_factory=EvaluationWeights)
    idm: IdmParams = field(default_factory=IdmParams)
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    def planner_config(self) -> PlannerConfig:
        """Planner config with the solver, ranges, ellipse and weights sections folded in."""
        return dataclasses.replace(self.planner, solver=self.solver, ranges=self.ranges,
                                   ellipse=self.ellipse, weights=self.weights)


# sections nested inside PlannerConfig that live at the top level of the file
_LIFTED = ("solver", "ranges", "ellipse", "weights")
_MATRIX_KEYS = ("Qx", "Qy", "Qtheta")


def _build(cls, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    if cls is PlannerConfig:
        known = {k: v for k, v in known.items() if k not in _LIFTED}
    kwargs = {}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key" if path else f"{key}: unknown key")
        kwargs[key] = _coerce(known[key], val, f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _coerce(f, val, path):
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    if dataclasses.is_dataclass(default):
        return _build(type(default), val, path)
    if f.name in _MATRIX_KEYS:
        return None if val is None else np.asarray(val, dtype=float)
    if isinstance(default, tuple):
        if not isinstance(val, (list, tuple)) or len(val) != len(default):
            raise ConfigError(f"{path}: expected a list of {len(default)} numbers")
        return tuple(float(v) for v in val)
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{path}: expected true/false")
        return val
    if isinstance(default, int) and not isinstance(val, bool) and isinstance(val, (int, float)):
        if float(val) != int(val):
            raise ConfigError(f"{path}: expected an integer")
        return int(val)
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(val)
    return val


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"scenario: must be one of {SCENARIOS}, got {cfg.scenario!r}")
    if cfg.scenario == "replay" and not cfg.replay_path:
        raise ConfigError("replay_path: required for the replay scenario")
    if not isinstance(cfg.seeds, list) or not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds: expected a nonempty list of integers")
    if cfg.steps < 1:
        raise ConfigError("steps: must be positive")
    if cfg.workers < 1:
        raise ConfigError("workers: must be positive")
    if cfg.v_target < LIMITS.v[0] or cfg.v_target > LIMITS.v[1]:
        raise ConfigError(f"v_target: {cfg.v_target} outside {list(LIMITS.v)}")
    for f in fields(Ranges):
        lo, hi = getattr(cfg.ranges, f.name)
        lim = getattr(LIMITS, f.name)
        if lo > hi:
            raise ConfigError(f"ranges.{f.name}: lower bound exceeds upper bound")
        if lo < lim[0] or hi > lim[1]:
            raise ConfigError(f"ranges.{f.name}: [{lo}, {hi}] outside allowed {list(lim)}")
    p = cfg.planner
    if p.target_mode not in ("shared", "adaptive", "cycle"):
        raise ConfigError(f"planner.target_mode: unknown mode {p.target_mode!r}")
    if not 0 <= p.Ns < p.N:
        raise ConfigError(f"planner.Ns: must lie in [0, N={p.N})")
    if min(p.n, p.N, p.Nc, p.M) < 1 or p.T <= 0:
        raise ConfigError("planner: n, N, Nc, M must be positive and T > 0")
    if not 0 < p.alpha_init <= 1:
        raise ConfigError("planner.alpha_init: must lie in (0, 1]")
    return cfg


def from_dict(raw: dict | None) -> RunConfig:
    return validate(_build(RunConfig, raw or {}, ""))


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(raw)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def to_dict(cfg: RunConfig) -> dict:
    d = _plain(cfg)
    for key in _LIFTED:  # these live at the top level
        d["planner"].pop(key)
    return d


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that shapes an episode (seeds and output location excluded)."""
    d = to_dict(cfg)
    for key in ("seeds", "out", "workers"):
        d.pop(key)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
