"""Command-line entry points: train, eval, compare, trace, selftest.

Exit codes: 0 success, 1 usage error, 2 configuration error. The default
output root is ./overtake_data, overridable with OVERTAKE_DATA_DIR.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import oracles
from .curriculum import RunManifest, TrainerSession
from .env import RaceEnv
from .errors import ConfigurationError, UsageError
from .evaluation import (
    deterministic_policy,
    evaluate_agent,
    get_setting,
    load_agent,
    run_episode,
    setting_config,
    summarize,
)
from .nn import Mlp
from .reward import RewardInputs, RewardWeights, overtaking_reward, racing_reward
from .sac import ReplayBuffer, SacAgent, Transition
from .sensing import LAYOUT_HASH, NormStats, cast_lidar
from .track import TrackGeometry, bundled_track
from .vehicle import CarParams

METRIC_COLUMNS = ["episode", "seed", "travel_time", "travel_distance",
                  "car_collision_time", "wall_collision_time",
                  "overtakes_completed", "success"]
COMPARE_COLUMNS = ["agent", "travel_time_mean", "travel_time_std",
                   "travel_distance_mean", "car_collision_time_mean",
                   "wall_collision_time_mean", "success_rate",
                   "best_travel_time"]


def data_root() -> Path:
    return Path(os.environ.get("OVERTAKE_DATA_DIR", "overtake_data"))


def _episode_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in
            np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)]


def _load(checkpoint: str, stats: str | None):
    ckpt_path = Path(checkpoint)
    stats_path = Path(stats) if stats else ckpt_path.parent / "norm.stats"
    try:
        return load_agent(ckpt_path, stats_path)
    except FileNotFoundError as e:
        raise ConfigurationError(f"missing file: {e.filename}") from e


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


# -- commands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        manifest = RunManifest.from_file(args.manifest)
    except FileNotFoundError as e:
        raise ConfigurationError(f"missing manifest: {args.manifest}") from e
    if args.seed is not None:
        manifest = replace(manifest, seed=args.seed)
    out = Path(args.out) if args.out else data_root() / manifest.name
    agent = None
    stats = None
    if args.resume:
        try:
            agent, ckpt_hash = SacAgent.load(args.resume)
        except FileNotFoundError as e:
            raise ConfigurationError(f"missing checkpoint: {args.resume}") from e
        stats_path = Path(args.resume).parent / "norm.stats"
        if stats_path.exists():
            stats = NormStats.load(stats_path)
            if not (ckpt_hash == stats.layout_hash == LAYOUT_HASH):
                raise ConfigurationError(
                    "resume checkpoint/stats layout mismatch: "
                    f"{ckpt_hash:#x} vs {stats.layout_hash:#x} vs {LAYOUT_HASH:#x}")
    session = TrainerSession(manifest, out, agent=agent, stats=stats)
    rows = session.run()
    print(f"trained {session.total_steps} environment steps "
          f"across {len(manifest.stages)} stage(s); outputs in {out}")
    for row in rows:
        print(f"  stage {row['stage']} @ {row['total_steps']} steps: "
              f"eval return {row['eval_return_mean']:.2f}, "
              f"success rate {row['success_rate']:.2f}, "
              f"lap {row['lap_time']:.1f} s")
    return 0


def cmd_eval(args) -> int:
    setting = get_setting(args.setting)
    episodes = args.episodes if args.episodes else setting.repetitions
    agent, stats = _load(args.checkpoint, args.stats)
    config = setting_config(setting, track=args.track)
    seeds = _episode_seeds(args.seed, episodes)
    metrics = evaluate_agent(agent, stats, config, seeds)
    rows = []
    for i, (s, m) in enumerate(zip(seeds, metrics)):
        rows.append({
            "episode": i, "seed": s,
            "travel_time": m.travel_time,
            "travel_distance": m.travel_distance,
            "car_collision_time": m.car_collision_time,
            "wall_collision_time": m.wall_collision_time,
            "overtakes_completed": m.overtakes_completed,
            "success": m.success,
        })
    out = Path(args.out) if args.out else data_root()
    csv_path = out / f"metrics_{setting.setting_id}_seed{args.seed}.csv"
    _write_csv(csv_path, METRIC_COLUMNS, rows)
    summary = summarize(metrics)
    print(f"setting {setting.setting_id}: {len(metrics)} episodes")
    print(f"  success rate        {summary['success_rate']:.2f}")
    print(f"  travel time         {summary['travel_time_mean']:.2f} "
          f"+/- {summary['travel_time_std']:.2f} s")
    print(f"  travel distance     {summary['travel_distance_mean']:.1f} m")
    print(f"  car collision time  {summary['car_collision_time_mean']:.2f} s")
    print(f"  wall collision time {summary['wall_collision_time_mean']:.2f} s")
    print(f"  best travel time    {summary['best_travel_time']:.2f} s")
    print(f"wrote {csv_path}")
    return 0


def cmd_compare(args) -> int:
    if len(args.checkpoints) < 2:
        raise UsageError("compare needs at least two checkpoints")
    setting = get_setting(args.setting)
    episodes = args.episodes if args.episodes else setting.repetitions
    seeds = _episode_seeds(args.seed, episodes)
    config = setting_config(setting, track=args.track)
    rows = []
    for ckpt in args.checkpoints:
        agent, stats = _load(ckpt, None)
        summary = summarize(evaluate_agent(agent, stats, config, seeds))
        rows.append({
            "agent": Path(ckpt).stem,
            "travel_time_mean": summary["travel_time_mean"],
            "travel_time_std": summary["travel_time_std"],
            "travel_distance_mean": summary["travel_distance_mean"],
            "car_collision_time_mean": summary["car_collision_time_mean"],
            "wall_collision_time_mean": summary["wall_collision_time_mean"],
            "success_rate": summary["success_rate"],
            "best_travel_time": summary["best_travel_time"],
        })
    out = Path(args.out) if args.out else data_root()
    csv_path = out / f"compare_{setting.setting_id}.csv"
    _write_csv(csv_path, COMPARE_COLUMNS, rows)
    widths = [max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in COMPARE_COLUMNS]
    print("  ".join(c.ljust(w) for c, w in zip(COMPARE_COLUMNS, widths)))
    for r in rows:
        print("  ".join(_fmt(r[c]).ljust(w) for c, w in zip(COMPARE_COLUMNS, widths)))
    print(f"wrote {csv_path}")
    return 0


def cmd_trace(args) -> int:
    setting = get_setting(args.setting)
    agent, stats = _load(args.checkpoint, args.stats)
    config = setting_config(setting, track=args.track)
    env = RaceEnv(config, stats=stats)
    env.enable_trace()
    metrics = run_episode(env, deterministic_policy(agent), seed=args.seed,
                          max_steps=config.episode_steps)
    out = Path(args.out) if args.out else data_root() / "traces"
    out.mkdir(parents=True, exist_ok=True)
    base = f"trace_{setting.setting_id}_seed{args.seed}"
    csv_path = out / f"{base}.csv"
    svg_path = out / f"{base}.svg"
    env.write_trace(csv_path)
    write_trace_svg(env.track, env._trace_rows, svg_path,
                    n_cars=1 + config.n_opponents)
    print(f"episode: success={int(metrics.success)} "
          f"travel_time={metrics.travel_time:.1f}s "
          f"overtakes={metrics.overtakes_completed}")
    print(f"wrote {csv_path}")
    print(f"wrote {svg_path}")
    return 0


def cmd_selftest(args) -> int:
    failures = 0
    for name, fn in _SELFTESTS:
        try:
            fn()
        except AssertionError as e:
            failures += 1
            print(f"FAIL - {name}: {e}")
        else:
            print(f"ok   - {name}")
    if failures:
        print(f"{failures} selftest(s) failed")
        return 1
    print("all selftests passed")
    return 0


# -- svg export --------------------------------------------------------------------


def _speed_color(v: float, vmin: float, vmax: float) -> str:
    t = 0.0 if vmax <= vmin else (v - vmin) / (vmax - vmin)
    return f"#{int(255 * t):02x}30{int(255 * (1.0 - t)):02x}"


def _points_attr(pts) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)


def write_trace_svg(track: TrackGeometry, trace_rows, path, n_cars: int) -> None:
    """Track overlay: 2 boundary polylines, one path per car, ego speed shading.

    The ego path is additionally shaded by per-step speed with short line
    segments; collision steps get circle markers. A legend outside the
    flipped-coordinate group shows the speed scale with min/max endpoints.
    """
    cars: dict[int, list] = {i: [] for i in range(n_cars)}
    for row in trace_rows:
        cid = int(row[1])
        cars[cid].append((float(row[2]), float(row[3]), float(row[5]),
                          int(row[8]), int(row[9])))
    left, right = track.wall_polylines()
    allpts = np.vstack([left, right])
    margin = 15.0
    x0, y0 = allpts.min(axis=0) - margin
    x1, y1 = allpts.max(axis=0) + margin
    width, height = x1 - x0, y1 - y0

    ego = cars[0]
    speeds = [p[2] for p in ego] or [0.0]
    vmin, vmax = min(speeds), max(speeds)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="{x0:.1f} {-y1:.1f} {width:.1f} {height + 30:.1f}">',
        '<defs><linearGradient id="speedscale" x1="0" y1="0" x2="1" y2="0">',
        f'<stop offset="0" stop-color="{_speed_color(vmin, vmin, vmax)}"/>',
        f'<stop offset="1" stop-color="{_speed_color(vmax, vmin, vmax)}"/>',
        "</linearGradient></defs>",
        '<g transform="matrix(1 0 0 -1 0 0)">',
    ]
    for poly in (left, right):
        closed = np.vstack([poly, poly[:1]])
        parts.append(f'<polyline points="{_points_attr(closed)}" fill="none" '
                     'stroke="#606060" stroke-width="1.0"/>')
    for cid in range(n_cars):
        pts = [(p[0], p[1]) for p in cars[cid]]
        d = "M " + " L ".join(f"{x:.2f} {y:.2f}" for x, y in pts)
        color = "#202020" if cid == 0 else "#9467bd"
        dash = "" if cid == 0 else ' stroke-dasharray="4 3"'
        parts.append(f'<path d="{d}" fill="none" stroke="{color}" '
                     f'stroke-width="0.8"{dash}/>')
    for (xa, ya, va, _, _), (xb, yb, vb, _, _) in zip(ego[:-1], ego[1:]):
        parts.append(f'<line x1="{xa:.2f}" y1="{ya:.2f}" x2="{xb:.2f}" '
                     f'y2="{yb:.2f}" stroke="{_speed_color(vb, vmin, vmax)}" '
                     'stroke-width="2.2"/>')
    for x, y, _, wall, car in ego:
        if car:
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" '
                         'fill="none" stroke="#d62728" stroke-width="1.2"/>')
        elif wall:
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" '
                         'fill="none" stroke="#ff7f0e" stroke-width="1.2"/>')
    parts.append("</g>")
    ly = -y1 + height + 8
    parts.append(f'<rect x="{x0 + 10:.1f}" y="{ly:.1f}" width="120" height="10" '
                 'fill="url(#speedscale)"/>')
    parts.append(f'<text x="{x0 + 10:.1f}" y="{ly + 22:.1f}" font-size="9">'
                 f"{vmin:.3f} m/s</text>")
    parts.append(f'<text x="{x0 + 130:.1f}" y="{ly + 22:.1f}" font-size="9" '
                 f'text-anchor="end">{vmax:.3f} m/s</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


# -- selftests ---------------------------------------------------------------------


def _circle_track(radius: float = 40.0, n: int = 48,
                  half_width: float = 4.0) -> TrackGeometry:
    t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    pts = radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    return TrackGeometry(pts, half_width)


def _selftest_rewards() -> None:
    rng = np.random.default_rng(11)
    track = _circle_track()
    length = track.total_length
    weights = RewardWeights(wall_collision=0.005, car_collision=0.005,
                            relative_progress=1.0, detection_range=30.0)
    for _ in range(2000):
        cp_prev, cp_curr = rng.uniform(0.0, length, size=2)
        vel = rng.uniform(-30, 30, size=3)
        wall = bool(rng.integers(0, 2))
        car = bool(rng.integers(0, 2))
        opponents = tuple(
            (rng.uniform(0, length), rng.uniform(0, length))
            for _ in range(int(rng.integers(0, 4))))
        inputs = RewardInputs(ego_cp_prev=cp_prev, ego_cp_curr=cp_curr,
                              speed=vel, wall_contact=wall, car_contact=car,
                              opponent_cp=opponents)
        got = racing_reward(inputs, weights, track)
        want = oracles.racing_reward_ref(cp_prev, cp_curr, vel, wall,
                                         weights.wall_collision, length)
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want)), f"racing {got} vs {want}"
        got = overtaking_reward(inputs, weights, track)
        want = oracles.overtaking_reward_ref(
            cp_prev, cp_curr, vel, wall, car, opponents,
            weights.wall_collision, weights.car_collision,
            weights.relative_progress, weights.detection_range, length)
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want)), f"overtake {got} vs {want}"


def _selftest_lidar() -> None:
    rng = np.random.default_rng(5)
    track = _circle_track()
    params = CarParams()
    for _ in range(40):
        ego, others = oracles.random_scene(track, rng)
        got = cast_lidar(ego, track, others, params).ranges
        want = oracles.scan_ref(ego, track, others, params)
        worst = float(np.max(np.abs(got - want)))
        assert worst <= 0.02, f"lidar mismatch {worst:.4f} m"


def _selftest_gradients() -> None:
    rng = np.random.default_rng(3)
    net = Mlp([8, 16, 16, 3], rng=rng, dtype=np.float64)
    x = rng.standard_normal((5, 8))
    target = rng.standard_normal((5, 3))

    def loss() -> float:
        out, _ = net.forward(x)
        return float(np.mean((out - target) ** 2))

    out, cache = net.forward(x)
    grads, _ = net.backward(cache, 2.0 * (out - target) / out.size)
    fd = oracles.finite_difference_grads(loss, net.parameters())
    for g, f in zip(grads, fd):
        scale = np.maximum(np.abs(f), 1e-6)
        rel = float(np.max(np.abs(g - f) / scale))
        assert rel < 1e-4, f"gradient relative error {rel:.2e}"


def _selftest_buffer() -> None:
    buf = ReplayBuffer(capacity=3, obs_dim=2, act_dim=1)
    for k in range(1, 5):
        buf.push(Transition(np.full(2, k), np.zeros(1), float(k),
                            np.full(2, k), False))
    assert sorted(buf.rew[:buf.size].tolist()) == [2.0, 3.0, 4.0], "FIFO eviction"
    buf10 = ReplayBuffer(capacity=10, obs_dim=1, act_dim=1)
    for k in range(10):
        buf10.push(Transition(np.zeros(1), np.zeros(1), float(k), np.zeros(1), False))
    rng = np.random.default_rng(0)
    _, _, rew, _, _ = buf10.sample(100_000, rng)
    freqs = np.bincount(rew.astype(int), minlength=10) / 100_000
    assert np.all(np.abs(freqs - 0.1) <= 0.01), f"sampling skew {freqs}"


def _selftest_projection() -> None:
    rng = np.random.default_rng(7)
    radius = 40.0
    track = _circle_track(radius=radius, n=720)
    for _ in range(50):
        angle = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(radius - 3, radius + 3)
        point = r * np.array([np.cos(angle), np.sin(angle)])
        frame = track.centerline_projection(point)
        want_arc = track.wrap(angle * track.total_length / (2 * np.pi))
        err = abs(track.progress_delta(want_arc, frame.arc_length))
        assert err < 0.05, f"projection arc error {err:.4f} m"


_SELFTESTS = [
    ("reward kernels vs brute force", _selftest_rewards),
    ("lidar vs ray-march oracle", _selftest_lidar),
    ("backward pass vs finite differences", _selftest_gradients),
    ("replay buffer FIFO and sampling", _selftest_buffer),
    ("centerline projection on a circle", _selftest_projection),
]


# -- argument plumbing ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="overtake",
                     description="2D racing simulator with curriculum SAC training")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="run a training manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a benchmark setting")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--setting", required=True)
    p.add_argument("--episodes", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--track", default="oval")
    p.add_argument("--stats", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="evaluate several checkpoints side by side")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--setting", required=True)
    p.add_argument("--episodes", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--track", default="oval")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("trace", help="export one episode as CSV + SVG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--setting", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--track", default="oval")
    p.add_argument("--stats", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def cli_main(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return cli_main(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
