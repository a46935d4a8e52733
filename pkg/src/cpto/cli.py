"""
Command line entry point: ``cpto run | bench | validate``.

Each episode writes ``seed_<k>_log.csv``, ``seed_<k>_trace.csv`` and
``seed_<k>_metrics.yaml`` to the output directory; the coordinator adds
``config.yaml`` and ``summary.yaml``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, RunConfig, config_hash, dump_config, from_dict, load_config, to_dict
from .planner import EpisodeLog, compute_metrics, run_episode
from .world import load_replay, make_scenario

BENCH_NC = (2, 3, 4, 5)
BENCH_M = (3, 4, 5, 6)
# aggregate table columns
TABLE = ("collision_rate", "mean_min_dist_m", "speed_mae_mps", "mean_abs_jx", "mean_abs_jy",
         "mean_abs_yaw_rate", "mean_solve_ms", "converged_rate")


def build_scenario(cfg: RunConfig, seed: int):
    replay = load_replay(cfg.replay_path) if cfg.scenario == "replay" else None
    return make_scenario(cfg.scenario, seed, perception=cfg.perception, idm=cfg.idm, replay=replay,
                         lane_width=cfg.planner.lane_width, n_lanes=cfg.n_lanes,
                         v_target=cfg.v_target, dt=cfg.planner.dt)


def simulate(cfg: RunConfig, seed: int, steps: int | None = None) -> EpisodeLog:
    scenario = build_scenario(cfg, seed)
    return run_episode(scenario, steps or cfg.steps, cfg.planner_config())


@dataclass
class EpisodeResult:
    seed: int
    metrics: dict | None = None
    error: str | None = None
    files: list = field(default_factory=list)


def _episode_job(raw_cfg: dict, seed: int, out: str) -> EpisodeResult:
    # runs in a worker process; the config travels as a plain dict
    cfg = from_dict(raw_cfg)
    res = EpisodeResult(seed)
    try:
        ep = simulate(cfg, seed)
    except Exception as exc:
        res.error = f"{type(exc).__name__}: {exc}"
        return res
    out = Path(out)
    paths = [out / f"seed_{seed}_log.csv", out / f"seed_{seed}_trace.csv", out / f"seed_{seed}_metrics.yaml"]
    ep.to_csv(paths[0])
    ep.write_trace(paths[1])
    res.files = [str(p) for p in paths[:2]]
    if len(ep):
        m = compute_metrics(ep, cfg.v_target).as_dict()
        m["meta"].update(config_hash=config_hash(cfg), error=ep.error)
        paths[2].write_text(yaml.safe_dump(m, sort_keys=False))
        res.metrics = m
        res.files.append(str(paths[2]))
    res.error = ep.error
    return res


def check_writable(out: Path):
    """Fail before any simulation if results could not be saved."""
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out):
            pass
    except OSError as exc:
        raise ConfigError(f"out: directory {str(out)!r} is not writable ({exc.strerror or exc})") from None


def aggregate(results) -> dict:
    ok = [r.metrics for r in results if r.metrics is not None]
    summary = {"episodes": len(results), "failed": [r.seed for r in results if r.error]}
    for key in TABLE + ("max_solve_ms", "fallback_steps", "steps"):
        vals = np.array([m[key] for m in ok], dtype=float)
        if vals.size:
            summary[key] = {"mean": float(vals.mean()), "std": float(vals.std()),
                            "min": float(vals.min()), "max": float(vals.max())}
    return summary


def format_table(results) -> str:
    head = "seed " + " ".join(f"{c:>17s}" for c in TABLE)
    lines = [head]
    for r in results:
        if r.metrics is None:
            lines.append(f"{r.seed:>4d} failed: {r.error}")
            continue
        lines.append(f"{r.seed:>4d} " + " ".join(f"{r.metrics[c]:17.4f}" for c in TABLE))
    ok = [r.metrics for r in results if r.metrics is not None]
    if ok:
        lines.append(" avg " + " ".join(f"{np.mean([m[c] for m in ok]):17.4f}" for c in TABLE))
    return "\n".join(lines)


def run(cfg: RunConfig, stream=None) -> int:
    out = Path(cfg.out)
    check_writable(out)
    (out / "config.yaml").write_text(dump_config(cfg))
    raw = to_dict(cfg)
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(cfg.seeds))) as pool:
            futures = [pool.submit(_episode_job, raw, s, str(out)) for s in cfg.seeds]
            results = [f.result() for f in futures]
    else:
        results = [_episode_job(raw, s, str(out)) for s in cfg.seeds]
    summary = aggregate(results)
    summary["config_hash"] = config_hash(cfg)
    (out / "summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))
    print(format_table(results), file=stream or sys.stdout)
    for r in results:
        if r.error:
            print(f"seed {r.seed}: {r.error}", file=sys.stderr)
    return 1 if summary["failed"] else 0


@dataclass
class BenchCell:
    Nc: int
    M: int
    mean_ms: float
    min_ms: float
    max_ms: float
    steps: int


def bench(cfg: RunConfig, steps: int = 40, seed: int | None = None,
          grid_nc=BENCH_NC, grid_m=BENCH_M) -> list:
    """Solve-time sweep over (Nc, M) on the dense-traffic fixture."""
    seed = cfg.seeds[0] if seed is None else seed
    base = replace(cfg, scenario="idm-traffic")
    cells = []
    for nc in grid_nc:
        for m in grid_m:
            trial = replace(base, planner=replace(base.planner, Nc=nc, M=m))
            ep = simulate(trial, seed, steps)
            t = ep.column("solve_ms")
            if t.size == 0:
                raise RuntimeError(f"bench cell Nc={nc} M={m} produced no steps: {ep.error}")
            cells.append(BenchCell(nc, m, float(t.mean()), float(t.min()), float(t.max()), int(t.size)))
    return cells


def format_bench(cells) -> str:
    lines = [f"{'Nc':>3s} {'M':>3s} {'avg ms':>9s} {'min ms':>9s} {'max ms':>9s}"]
    lines += [f"{c.Nc:3d} {c.M:3d} {c.mean_ms:9.2f} {c.min_ms:9.2f} {c.max_ms:9.2f}" for c in cells]
    # reported, not enforced: average time should not drop as Nc grows
    for m in sorted({c.M for c in cells}):
        col = [c.mean_ms for c in sorted(cells, key=lambda c: c.Nc) if c.M == m]
        mono = all(b >= a for a, b in zip(col, col[1:]))
        lines.append(f"M={m}: average nondecreasing in Nc: {'yes' if mono else 'no'}")
    return "\n".join(lines)


@dataclass
class ValidationReport:
    seed: int
    steps: int
    converged_steps: int
    max_deviation_m: float
    min_h: float
    collision_rate: float
    error: str | None = None

    def ok(self, tol: float = 1e-2) -> bool:
        return (self.error is None and self.max_deviation_m <= tol and self.min_h >= 0.0
                and self.collision_rate == 0.0)


def validate_episode(ep: EpisodeLog, seed: int) -> ValidationReport:
    conv = ep.column("converged") > 0
    dev = ep.column("consensus_dev_m")[conv]
    h = ep.column("min_h_consensus")[conv]
    scale = ep.column("min_true_scale")
    return ValidationReport(seed, len(ep), int(conv.sum()),
                            float(dev.max()) if dev.size else 0.0,
                            float(h.min()) if h.size else np.inf,
                            float(np.mean(scale < 1.0)) if scale.size else 0.0, ep.error)


def validate(cfg: RunConfig) -> list:
    """Shared-segment safety check on the static-field scenario."""
    cfg = replace(cfg, scenario="static-field")
    return [validate_episode(simulate(cfg, s), s) for s in cfg.seeds]


def parse_seeds(text: str) -> list:
    """'0,3,5' or '0-4' or a mix of both."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError(f"no seeds in {text!r}")
    return seeds


def resolve_config(args) -> RunConfig:
    raw = to_dict(load_config(args.config)) if args.config else to_dict(RunConfig())
    if args.seeds is not None:
        raw["seeds"] = args.seeds
    if args.steps is not None:
        raw["steps"] = args.steps
    if args.out is not None:
        raw["out"] = args.out
    if args.consensus_steps is not None:
        raw["planner"]["Ns"] = args.consensus_steps
    if args.mode is not None:
        raw["solver"]["mode"] = args.mode
    if getattr(args, "workers", None) is not None:
        raw["workers"] = args.workers
    if getattr(args, "scenario", None) is not None:
        raw["scenario"] = args.scenario
    return from_dict(raw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--seeds", type=parse_seeds, metavar="LIST", help="e.g. 0,1,2 or 0-9")
    common.add_argument("--steps", type=int, metavar="N", help="steps per episode")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--consensus-steps", type=int, metavar="N_s", help="shared segment length")
    common.add_argument("--mode", choices=("paper-pseudoinverse", "kkt-exact"),
                        help="equality-constrained update")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cpto", description="Consensus parallel trajectory planner")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="simulate episodes for each seed")
    r.add_argument("--workers", type=int, metavar="K", help="parallel episode processes")
    r.add_argument("--scenario", choices=("static-field", "idm-traffic", "replay", "lane-change"))
    sub.add_parser("bench", parents=[common], help="solve-time sweep over Nc and M")
    sub.add_parser("validate", parents=[common], help="shared-segment safety check on static-field")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "run":
            return run(cfg)
        if args.command == "bench":
            cells = bench(cfg, steps=args.steps or 40)
            print(format_bench(cells))
            return 0
        reports = validate(cfg)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{'seed':>4s} {'steps':>5s} {'conv':>5s} {'max dev m':>10s} {'min h':>9s} {'collide':>8s}  result")
    for r in reports:
        print(f"{r.seed:4d} {r.steps:5d} {r.converged_steps:5d} {r.max_deviation_m:10.2e} "
              f"{r.min_h:9.4f} {r.collision_rate:8.3f}  {'ok' if r.ok() else 'FAIL'}"
              + (f" ({r.error})" if r.error else ""))
    return 0 if all(r.ok() for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
