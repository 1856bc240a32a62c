"""Episode orchestration: multi-car stepping, collisions, rewards, observations.

One environment instance hosts a single learner-controlled car plus zero or
more opponents driven by the built-in AI, stepped together at 10 Hz.
Collisions never terminate an episode; contact sets the per-step flags, feeds
the reward penalties, and is resolved by de-penetration so cars cannot
interpenetrate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .reward import RewardInputs, RewardWeights, overtaking_reward, racing_reward
from .sensing import NormStats, cast_lidar, normalize_features, raw_features
from .track import TrackFrame, TrackGeometry, bundled_track, load_track
from .vehicle import (
    Action,
    CarParams,
    DEFAULT_CAR,
    VehicleState,
    ai_equilibrium_speed,
    body_corners,
    builtin_ai_action,
    clamp_action,
    step_vehicle,
    wrap_angle,
)

DT = 0.1
TRACE_COLUMNS = [
    "step", "car_id", "x", "y", "heading", "speed", "cp",
    "lateral_offset", "wall_flag", "car_flag", "reward",
]


@dataclass(frozen=True)
class EnvConfig:
    track: str = "oval"
    n_opponents: int = 0
    initial_separation: float = 200.0
    opponent_layout: str = "consecutive_ahead"
    episode_steps: int = 1000
    dt: float = DT
    weights: RewardWeights = field(default_factory=RewardWeights)
    reward_kind: str = "racing"
    collision_mode: str = "resolve"
    target_speed_scale: float = 0.9
    car: CarParams = DEFAULT_CAR

    def __post_init__(self) -> None:
        if self.episode_steps <= 0:
            raise ConfigurationError("episode_steps must be positive")
        if self.dt != DT:
            raise ConfigurationError("the environment runs at a fixed 10 Hz (dt = 0.1 s)")
        if self.n_opponents < 0 or self.initial_separation < 0:
            raise ConfigurationError("n_opponents and initial_separation must be >= 0")
        if self.reward_kind not in ("racing", "overtaking"):
            raise ConfigurationError(f"unknown reward kind {self.reward_kind!r}")
        if self.collision_mode not in ("resolve", "flags_only"):
            raise ConfigurationError(f"unknown collision mode {self.collision_mode!r}")
        if self.opponent_layout != "consecutive_ahead":
            raise ConfigurationError(f"unknown opponent layout {self.opponent_layout!r}")


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


# -- collision geometry --------------------------------------------------------


def _obb_overlap(corners_a: np.ndarray, corners_b: np.ndarray):
    """Separating-axis test for two rectangles given as (4, 2) corner arrays.

    Returns None when separated, else the minimum translation vector that
    moves rectangle b out of rectangle a.
    """
    axes = np.vstack([
        corners_a[1] - corners_a[0], corners_a[3] - corners_a[0],
        corners_b[1] - corners_b[0], corners_b[3] - corners_b[0],
    ])
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    proj_a = corners_a @ axes.T
    proj_b = corners_b @ axes.T
    overlap = np.minimum(proj_a.max(0), proj_b.max(0)) - np.maximum(proj_a.min(0), proj_b.min(0))
    if np.any(overlap <= 0):
        return None
    k = int(np.argmin(overlap))
    axis = axes[k]
    direction = corners_b.mean(0) - corners_a.mean(0)
    if np.dot(direction, axis) < 0:
        axis = -axis
    return overlap[k] * axis


def detect_collisions(
    cars: list[VehicleState], track: TrackGeometry, params: CarParams = DEFAULT_CAR
) -> list[tuple[int, int]]:
    """Per-car (wall_flag, car_flag) from body-rectangle geometry.

    A wall flag fires when any corner lies beyond the wall; car flags fire
    symmetrically for every overlapping pair.
    """
    n = len(cars)
    corners = [body_corners(c, params) for c in cars]
    all_corners = np.vstack(corners) if n else np.empty((0, 2))
    _, lateral, _ = track.project_many(all_corners) if n else (None, np.empty(0), None)
    wall = [
        int(np.any(np.abs(lateral[4 * i: 4 * i + 4]) > track.half_width)) for i in range(n)
    ]
    car = [0] * n
    reach = math.hypot(params.body_length, params.body_width)
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(cars[i].position - cars[j].position) > reach:
                continue
            if _obb_overlap(corners[i], corners[j]) is not None:
                car[i] = car[j] = 1
    return list(zip(wall, car))


def resolve_car_contacts(
    cars: list[VehicleState], params: CarParams = DEFAULT_CAR, max_passes: int = 32
) -> list[VehicleState]:
    """De-penetrate overlapping pairs along the minimum translation vector.

    Both cars in a contact are displaced by half the overlap each and slowed
    by the contact factor 0.7. Pairs are processed in index order until no
    overlap remains (bounded number of passes).
    """
    cars = list(cars)
    n = len(cars)
    slowed = [False] * n
    for _ in range(max_passes):
        any_overlap = False
        for i in range(n):
            for j in range(i + 1, n):
                mtv = _obb_overlap(body_corners(cars[i], params), body_corners(cars[j], params))
                if mtv is None:
                    continue
                any_overlap = True
                shift = 0.5 * mtv + 1e-6 * mtv / max(np.linalg.norm(mtv), 1e-12)
                cars[i] = replace(cars[i], position=cars[i].position - shift)
                cars[j] = replace(cars[j], position=cars[j].position + shift)
                for k in (i, j):
                    if not slowed[k]:
                        slowed[k] = True
                        cars[k] = _set_speed(cars[k], cars[k].speed * 0.7)
        if not any_overlap:
            break
    return cars


def _set_speed(state: VehicleState, speed: float) -> VehicleState:
    speed = max(0.0, speed)
    return replace(
        state, speed=speed, body_velocity=np.array([speed, 0.0, 0.0])
    )


def resolve_wall_contact(
    state: VehicleState, track: TrackGeometry, params: CarParams = DEFAULT_CAR
) -> VehicleState:
    """Project a wall-violating car back inside and zero its lateral approach.

    The car is aligned with the centerline tangent (keeping its direction of
    travel), retains only the longitudinal component of its speed, and its
    center is clamped so the body stays inside the walls.
    """
    frame = track.centerline_projection(state.position)
    err = wrap_angle(state.heading - frame.tangent_heading)
    forward = abs(err) <= math.pi / 2
    heading = frame.tangent_heading if forward else wrap_angle(frame.tangent_heading + math.pi)
    speed = state.speed * abs(math.cos(err))

    max_lat = track.half_width - params.body_width / 2.0 - 1e-3
    lat = min(max(frame.lateral_offset, -max_lat), max_lat)
    center = track.point_at(frame.arc_length)
    tangent = np.array([math.cos(frame.tangent_heading), math.sin(frame.tangent_heading)])
    normal = np.array([-tangent[1], tangent[0]])
    new_state = replace(state, position=center + lat * normal, heading=heading)
    return _set_speed(new_state, speed)


def _car_protrudes(state: VehicleState, track: TrackGeometry, params: CarParams) -> bool:
    _, lateral, _ = track.project_many(body_corners(state, params))
    return bool(np.any(np.abs(lateral) > track.half_width))


# -- the environment -----------------------------------------------------------


def resolve_track(track_id: str) -> TrackGeometry:
    """Track id -> geometry; a bundled name or a path to a .track file."""
    if Path(track_id).suffix == ".track":
        return load_track(track_id)
    return bundled_track(track_id)


class RaceEnv:
    """A single learner car plus rule-based opponents on a closed track.

    When constructed with frozen normalization stats, StepResult.observation
    is the normalized policy input; with ``stats=None`` it carries the raw
    96 features (used while normalization statistics are being collected).
    """

    def __init__(self, config: EnvConfig, stats: NormStats | None = None,
                 track: TrackGeometry | None = None):
        self.config = config
        self.track = track if track is not None else resolve_track(config.track)
        if stats is not None and not stats.frozen:
            raise ContractViolation("environment requires frozen normalization stats")
        self.stats = stats
        span = config.n_opponents * config.initial_separation
        if config.n_opponents and span >= self.track.total_length:
            raise ConfigurationError(
                f"opponent layout spans {span:.0f} m but the track is only "
                f"{self.track.total_length:.0f} m long"
            )
        self.cars: list[VehicleState] = []
        self.cp: list[float] = []
        self.progress: list[float] = []
        self.step_index = 0
        self.done = True
        self._trace_rows: list[list] = []
        self._trace_enabled = False

    # -- lifecycle ---------------------------------------------------------------

    def reset(self, seed: int | None = None,
              start_cp: float | None = None) -> StepResult:
        cfg = self.config
        rng = np.random.default_rng(seed)
        if start_cp is None:
            ego_cp = float(rng.uniform(0.0, self.track.total_length))
        else:
            ego_cp = self.track.wrap(float(start_cp))
        ego = VehicleState.at(
            self.track.point_at(ego_cp),
            self.track.heading_at(ego_cp),
            0.5 * cfg.car.top_speed,
        )
        self.cars = [ego]
        self.cp = [ego_cp]
        self.progress = [0.0]
        for i in range(cfg.n_opponents):
            opp_cp = self.track.wrap(ego_cp + (i + 1) * cfg.initial_separation)
            speed = ai_equilibrium_speed(
                self.track, opp_cp, cfg.target_speed_scale, cfg.car
            )
            self.cars.append(
                VehicleState.at(self.track.point_at(opp_cp), self.track.heading_at(opp_cp), speed)
            )
            self.cp.append(opp_cp)
            self.progress.append((i + 1) * cfg.initial_separation)
        self.step_index = 0
        self.done = False
        self._trace_rows = []
        info = self._info(reward=0.0)
        self._record_trace(0.0)
        return StepResult(self._observe(), 0.0, False, info)

    def step(self, action) -> StepResult:
        if self.done:
            raise ContractViolation("step() called on a finished episode; reset first")
        cfg = self.config
        act = action if isinstance(action, Action) else clamp_action(action)
        act = clamp_action((act.steering, act.pedal))

        new_cars = [step_vehicle(self.cars[0], act, cfg.car, cfg.dt)]
        for opp in self.cars[1:]:
            ai = builtin_ai_action(opp, self.track, cfg.target_speed_scale, cfg.car)
            new_cars.append(step_vehicle(opp, ai, cfg.car, cfg.dt))
        penalty_speed = new_cars[0].body_velocity.copy()

        flags = detect_collisions(new_cars, self.track, cfg.car)
        if cfg.collision_mode == "resolve":
            if any(f[1] for f in flags):
                new_cars = resolve_car_contacts(new_cars, cfg.car)
            new_cars = [
                resolve_wall_contact(c, self.track, cfg.car)
                if _car_protrudes(c, self.track, cfg.car)
                else c
                for c in new_cars
            ]
        new_cars = [
            replace(c, wall_flag=w, car_flag=k) for c, (w, k) in zip(new_cars, flags)
        ]

        prev_cp = self.cp
        arcs, _, _ = self.track.project_many([c.position for c in new_cars])
        self.cp = [float(a) for a in arcs]
        self.progress = [
            p + self.track.progress_delta(pc, cc)
            for p, pc, cc in zip(self.progress, prev_cp, self.cp)
        ]

        inputs = RewardInputs(
            ego_cp_prev=prev_cp[0],
            ego_cp_curr=self.cp[0],
            speed=penalty_speed,
            wall_contact=flags[0][0],
            car_contact=flags[0][1],
            opponent_cp=tuple(zip(prev_cp[1:], self.cp[1:])),
        )
        if cfg.reward_kind == "racing":
            reward = racing_reward(inputs, cfg.weights, self.track)
        else:
            reward = overtaking_reward(inputs, cfg.weights, self.track)

        self.cars = new_cars
        self.step_index += 1
        self.done = self.step_index >= cfg.episode_steps
        info = self._info(reward)
        self._record_trace(reward)
        return StepResult(self._observe(), float(reward), self.done, info)

    # -- views -------------------------------------------------------------------

    def _observe(self) -> np.ndarray:
        ego = self.cars[0]
        frame = self.track.centerline_projection(ego.position)
        scan = cast_lidar(ego, self.track, self.cars[1:], self.config.car)
        raw = raw_features(ego, scan, frame, self.track)
        if self.stats is None:
            return raw
        return normalize_features(raw, self.stats)

    def _info(self, reward: float) -> dict:
        delta_cp = [
            self.track.progress_delta(self.cp[0], c) for c in self.cp[1:]
        ]
        return {
            "step": self.step_index,
            "cp": self.cp[0],
            "opponent_cp": list(self.cp[1:]),
            "delta_cp": delta_cp,
            "progress": self.progress[0],
            "opponent_progress": list(self.progress[1:]),
            "lead": [self.progress[0] - p for p in self.progress[1:]],
            "wall_contact": self.cars[0].wall_flag,
            "car_contact": self.cars[0].car_flag,
            "speed": self.cars[0].speed,
            "reward": reward,
        }

    # -- tracing -----------------------------------------------------------------

    def enable_trace(self) -> None:
        self._trace_enabled = True

    def _record_trace(self, reward: float) -> None:
        if not self._trace_enabled:
            return
        for car_id, (car, cp) in enumerate(zip(self.cars, self.cp)):
            frame = self.track.centerline_projection(car.position)
            self._trace_rows.append([
                self.step_index, car_id,
                f"{car.position[0]:.6f}", f"{car.position[1]:.6f}",
                f"{car.heading:.6f}", f"{car.speed:.6f}", f"{cp:.6f}",
                f"{frame.lateral_offset:.6f}", car.wall_flag, car.car_flag,
                f"{reward if car_id == 0 else 0.0:.9f}",
            ])

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(TRACE_COLUMNS)
            writer.writerows(self._trace_rows)
