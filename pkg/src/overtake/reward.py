"""Racing and overtaking reward kernels.

The racing reward pays centerline progress per step and charges a
kinetic-energy-scaled penalty while wall contact persists. The overtaking
reward adds the analogous car-contact penalty plus, for every opponent within
the detection range, the per-step change in relative progress: positive while
closing from behind and while pulling away after a pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .track import TrackGeometry


@dataclass(frozen=True)
class RewardWeights:
    wall_collision: float = 0.005  # c_w
    car_collision: float = 0.005  # c_c
    relative_progress: float = 1.0  # c_r
    detection_range: float = 30.0  # c_d, meters

    def __post_init__(self) -> None:
        if self.wall_collision < 0 or self.car_collision < 0 or self.relative_progress < 0:
            raise ValueError("reward weights must be non-negative")
        if self.detection_range <= 0:
            raise ValueError("detection_range must be positive")


@dataclass(frozen=True)
class RewardInputs:
    """Per-step quantities the reward kernels consume.

    opponent_cp holds one (cp_prev, cp_curr) pair per live opponent. Collision
    flags are 1 for every step the contact persists.
    """

    ego_cp_prev: float
    ego_cp_curr: float
    speed: np.ndarray  # body-frame velocity vector
    wall_contact: int
    car_contact: int
    opponent_cp: tuple = ()


def gate(delta_cp: float, detection_range: float) -> int:
    """1 iff |delta_cp| is strictly inside the detection range."""
    return 1 if abs(delta_cp) < detection_range else 0


def racing_reward(inputs: RewardInputs, weights: RewardWeights, track: TrackGeometry) -> float:
    """Wrap-aware progress minus the wall-contact penalty."""
    progress = track.progress_delta(inputs.ego_cp_prev, inputs.ego_cp_curr)
    speed_sq = float(np.dot(inputs.speed, inputs.speed))
    return progress - weights.wall_collision * inputs.wall_contact * speed_sq


def overtaking_reward(
    inputs: RewardInputs, weights: RewardWeights, track: TrackGeometry
) -> float:
    """Racing reward, car-contact penalty, and the gated relative-progress sum.

    For opponent i with progress difference d_t = cp_i - cp_ego (wrap-aware),
    the term pays c_r * (d_prev - d_curr) whenever |d_curr| is inside the
    detection range.
    """
    speed_sq = float(np.dot(inputs.speed, inputs.speed))
    total = racing_reward(inputs, weights, track)
    total -= weights.car_collision * inputs.car_contact * speed_sq
    for opp_prev, opp_curr in inputs.opponent_cp:
        d_prev = track.progress_delta(inputs.ego_cp_prev, opp_prev)
        d_curr = track.progress_delta(inputs.ego_cp_curr, opp_curr)
        if gate(d_curr, weights.detection_range):
            total += weights.relative_progress * (d_prev - d_curr)
    return total
