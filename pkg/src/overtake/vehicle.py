"""Kinematic car plant and the rule-based opponent controller.

The plant is a kinematic bicycle with quadratic drag and asymmetric
throttle/brake authority, integrated with semi-implicit Euler at a fixed
control rate: speed and heading update first, then position advances at the
new speed. There is no lateral slip; the lateral body-velocity component is
identically zero but kept in the state so observations retain their layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .track import TrackGeometry

MAX_STEER = math.pi / 6.0
AI_LAT_ACCEL = 6.0  # m/s^2, lateral budget assumed by the built-in AI
AI_PEDAL_GAIN = 0.5  # pedal per m/s of speed error


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(a, math.tau)
    if r <= -math.pi:
        r += math.tau
    return r


@dataclass(frozen=True)
class Action:
    steering: float  # radians, in [-MAX_STEER, MAX_STEER]
    pedal: float  # throttle > 0, brake < 0, in [-1, 1]


def clamp_action(raw) -> Action:
    """Clamp a raw (steering, pedal) pair into Action bounds."""
    s, w = float(raw[0]), float(raw[1])
    if math.isnan(s) or math.isnan(w):
        raise ContractViolation(f"action components must not be NaN: {raw}")
    return Action(min(max(s, -MAX_STEER), MAX_STEER), min(max(w, -1.0), 1.0))


@dataclass(frozen=True)
class CarParams:
    wheelbase: float = 2.5
    max_accel: float = 6.0
    max_brake_decel: float = 10.0
    top_speed: float = 55.0
    body_length: float = 4.2
    body_width: float = 1.8
    drag_coeff: float = field(default=0.0)  # 1/m; 0 means derive from top_speed

    def __post_init__(self) -> None:
        for name in ("wheelbase", "max_accel", "max_brake_decel", "top_speed",
                     "body_length", "body_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        derived = self.max_accel / self.top_speed**2
        if self.drag_coeff == 0.0:
            object.__setattr__(self, "drag_coeff", derived)
        elif abs(self.drag_coeff - derived) > 1e-6 * derived:
            raise ValueError(
                f"drag_coeff {self.drag_coeff} inconsistent with "
                f"max_accel/top_speed^2 = {derived}"
            )


DEFAULT_CAR = CarParams()


@dataclass(frozen=True)
class VehicleState:
    """Pose, velocity and collision flags of one car.

    body_velocity and body_acceleration are 3-vectors (longitudinal,
    lateral, vertical); lateral and vertical components stay 0 under this
    plant.
    """

    position: np.ndarray
    heading: float
    body_velocity: np.ndarray
    body_acceleration: np.ndarray
    speed: float
    prev_steering: float = 0.0
    wall_flag: int = 0
    car_flag: int = 0

    @staticmethod
    def at(position, heading: float, speed: float = 0.0) -> "VehicleState":
        pos = np.asarray(position, dtype=np.float64)
        return VehicleState(
            position=pos,
            heading=wrap_angle(heading),
            body_velocity=np.array([speed, 0.0, 0.0]),
            body_acceleration=np.zeros(3),
            speed=float(speed),
        )


def body_corners(state: VehicleState, params: CarParams = DEFAULT_CAR) -> np.ndarray:
    """Corners of the car's oriented body rectangle, (4, 2), counterclockwise."""
    hl, hw = params.body_length / 2.0, params.body_width / 2.0
    c, s = math.cos(state.heading), math.sin(state.heading)
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return state.position + local @ rot.T


def step_vehicle(
    state: VehicleState, action: Action, params: CarParams = DEFAULT_CAR, dt: float = 0.1
) -> VehicleState:
    """Advance one control interval; returns a new state with flags cleared."""
    if dt <= 0:
        raise ContractViolation("dt must be positive")
    if not (
        math.isfinite(state.speed)
        and math.isfinite(state.heading)
        and np.isfinite(state.position).all()
        and math.isfinite(action.steering)
        and math.isfinite(action.pedal)
    ):
        raise ContractViolation("non-finite vehicle state or action")

    v = state.speed
    drag = params.drag_coeff * v * v
    if action.pedal >= 0:
        accel = action.pedal * params.max_accel - drag
    else:
        accel = action.pedal * params.max_brake_decel - drag
    v_new = min(max(v + accel * dt, 0.0), params.top_speed)

    dheading = v_new * math.tan(action.steering) / params.wheelbase * dt
    heading = wrap_angle(state.heading + dheading) if dheading != 0.0 else state.heading
    position = state.position + v_new * dt * np.array(
        [math.cos(heading), math.sin(heading)]
    )
    return VehicleState(
        position=position,
        heading=heading,
        body_velocity=np.array([v_new, 0.0, 0.0]),
        body_acceleration=np.array([(v_new - v) / dt, 0.0, 0.0]),
        speed=v_new,
        prev_steering=action.steering,
        wall_flag=0,
        car_flag=0,
    )


def ai_target_speed(
    track: TrackGeometry, arc_length: float, target_speed_scale: float,
    params: CarParams = DEFAULT_CAR,
) -> float:
    """Curvature-limited target speed the built-in AI tracks at an arc length."""
    curv = abs(track.curvature_at(arc_length))
    return target_speed_scale * min(params.top_speed, math.sqrt(AI_LAT_ACCEL / max(curv, 1e-6)))


def ai_equilibrium_speed(
    track: TrackGeometry, arc_length: float, target_speed_scale: float = 0.9,
    params: CarParams = DEFAULT_CAR,
) -> float:
    """Speed where the AI's proportional pedal balances drag at an arc length.

    Solves gain*(v_target - v)*max_accel = drag*v^2 for v, with the pedal
    saturation bound applied.
    """
    v_t = ai_target_speed(track, arc_length + 5.0, target_speed_scale, params)
    a = params.drag_coeff
    b = AI_PEDAL_GAIN * params.max_accel
    v = (-b + math.sqrt(b * b + 4.0 * a * b * v_t)) / (2.0 * a)
    return min(v, params.top_speed)


def builtin_ai_action(
    state: VehicleState,
    track: TrackGeometry,
    target_speed_scale: float = 0.9,
    params: CarParams = DEFAULT_CAR,
) -> Action:
    """Rule-based opponent: pure-pursuit steering plus proportional pedal.

    Steers toward a centerline point max(5 m, 0.5 s * speed) ahead and tracks
    the curvature-limited target speed at that point.
    """
    frame = track.centerline_projection(state.position)
    lookahead = max(5.0, 0.5 * state.speed)
    target = track.point_at(frame.arc_length + lookahead)
    dx, dy = target[0] - state.position[0], target[1] - state.position[1]
    alpha = wrap_angle(math.atan2(dy, dx) - state.heading)
    steering = math.atan2(2.0 * params.wheelbase * math.sin(alpha), lookahead)

    v_target = ai_target_speed(track, frame.arc_length + lookahead, target_speed_scale, params)
    pedal = AI_PEDAL_GAIN * (v_target - state.speed)
    return clamp_action((steering, pedal))
