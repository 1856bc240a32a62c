"""Evaluation: metric episodes, the A/B benchmark settings, and lap timing.

An evaluation episode succeeds once the ego leads every opponent's cumulative
progress by at least SUCCESS_MARGIN meters; the clock stops there. Episodes
that survive HORIZON_FACTOR times the nominal episode length without reaching
that margin count as failures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import DT, EnvConfig, RaceEnv, resolve_track
from .errors import ConfigurationError, UsageError
from .reward import RewardWeights
from .sac import SacAgent, to_env_action
from .sensing import LAYOUT_HASH, NormStats
from .track import TrackGeometry
from .vehicle import Action, CarParams, builtin_ai_action

SUCCESS_MARGIN = 10.0
HORIZON_FACTOR = 3
NOMINAL_EPISODE_STEPS = 1000


@dataclass(frozen=True)
class EvalSetting:
    """A benchmark layout: how many opponents, how far apart, how many runs."""

    setting_id: str
    n_opponents: int = 5
    separation: float = 50.0
    repetitions: int = 10


SETTINGS = {
    "A": EvalSetting("A", n_opponents=5, separation=50.0, repetitions=10),
    "B": EvalSetting("B", n_opponents=5, separation=200.0, repetitions=10),
}


def get_setting(name: str) -> EvalSetting:
    if name not in SETTINGS:
        raise UsageError(
            f"unknown setting {name!r}; choose one of {sorted(SETTINGS)}")
    return SETTINGS[name]


@dataclass
class EpisodeMetrics:
    travel_time: float
    travel_distance: float
    car_collision_time: float
    wall_collision_time: float
    overtakes_completed: int
    success: bool

    def __post_init__(self) -> None:
        eps = 1e-9
        if self.travel_distance < 0:
            raise ValueError("negative travel distance")
        if self.car_collision_time > self.travel_time + eps:
            raise ValueError("car collision time exceeds travel time")
        if self.wall_collision_time > self.travel_time + eps:
            raise ValueError("wall collision time exceeds travel time")


def run_episode(env: RaceEnv, act_fn, seed: int, max_steps: int,
                success_margin: float = SUCCESS_MARGIN) -> EpisodeMetrics:
    """Roll one metric episode; act_fn maps an observation to an Action.

    Terminates on success (every opponent led by >= success_margin), on the
    environment's own episode limit, or after max_steps, whichever first.
    Travel distance integrates the ego speed (odometer, not displacement).
    """
    res = env.reset(seed=seed)
    steps = 0
    distance = 0.0
    wall_time = 0.0
    car_time = 0.0
    success = False
    info = res.info
    while steps < max_steps:
        res = env.step(act_fn(res.observation))
        info = res.info
        steps += 1
        distance += info["speed"] * DT
        if info["wall_contact"]:
            wall_time += DT
        if info["car_contact"]:
            car_time += DT
        if info["lead"] and min(info["lead"]) >= success_margin:
            success = True
            break
        if res.done:
            break
    overtakes = sum(1 for lead in info["lead"] if lead >= success_margin)
    return EpisodeMetrics(
        travel_time=steps * DT,
        travel_distance=distance,
        car_collision_time=car_time,
        wall_collision_time=wall_time,
        overtakes_completed=overtakes,
        success=success,
    )


def deterministic_policy(agent: SacAgent):
    """The greedy action map of a trained agent."""

    def act(observation: np.ndarray) -> Action:
        a = agent.act_batch(observation.reshape(1, -1), mode="deterministic")[0]
        return to_env_action(a)

    return act


def setting_config(setting: EvalSetting, track: str = "oval",
                   weights: RewardWeights | None = None,
                   horizon: int | None = None) -> EnvConfig:
    horizon = HORIZON_FACTOR * NOMINAL_EPISODE_STEPS if horizon is None else horizon
    return EnvConfig(
        track=track,
        n_opponents=setting.n_opponents,
        initial_separation=setting.separation,
        episode_steps=horizon,
        reward_kind="overtaking" if setting.n_opponents else "racing",
        weights=RewardWeights() if weights is None else weights,
    )


def evaluate_agent(agent: SacAgent, stats: NormStats, config: EnvConfig,
                   seeds, track: TrackGeometry | None = None,
                   max_steps: int | None = None) -> list[EpisodeMetrics]:
    """Deterministic-policy metric episodes, one per seed."""
    env = RaceEnv(config, stats=stats, track=track)
    act = deterministic_policy(agent)
    limit = config.episode_steps if max_steps is None else max_steps
    return [run_episode(env, act, seed=int(s), max_steps=limit) for s in seeds]


def load_agent(checkpoint_path, stats_path) -> tuple[SacAgent, NormStats]:
    """Load a checkpoint plus its normalization stats, verifying layouts."""
    agent, ckpt_hash = SacAgent.load(checkpoint_path)
    stats = NormStats.load(stats_path)
    if not (ckpt_hash == stats.layout_hash == LAYOUT_HASH):
        raise ConfigurationError(
            "observation layout mismatch: "
            f"checkpoint {ckpt_hash:#x}, stats {stats.layout_hash:#x}, "
            f"code {LAYOUT_HASH:#x}")
    return agent, stats


def summarize(metrics: list[EpisodeMetrics]) -> dict:
    """Mean/std of the four metrics plus success rate and the best success."""
    if not metrics:
        raise UsageError("no episodes to summarize")
    fields = ("travel_time", "travel_distance", "car_collision_time",
              "wall_collision_time")
    out: dict = {}
    for name in fields:
        values = np.array([getattr(m, name) for m in metrics], dtype=np.float64)
        out[f"{name}_mean"] = float(values.mean())
        out[f"{name}_std"] = float(values.std())
    out["success_rate"] = float(np.mean([m.success for m in metrics]))
    out["overtakes_mean"] = float(np.mean([m.overtakes_completed for m in metrics]))
    wins = [m for m in metrics if m.success]
    out["best_travel_time"] = (
        min(w.travel_time for w in wins) if wins else float("nan"))
    return out


# -- lap timing -------------------------------------------------------------------


def _lap_time(env: RaceEnv, act_fn, seed: int, max_steps: int) -> float:
    """Flying-lap time: the second full lap, excluding the start transient.

    Crossing times are linearly interpolated inside the crossing step.
    Returns inf when two laps are not completed within max_steps.
    """
    total = env.track.total_length
    prev_progress = 0.0
    crossings: list[float] = []
    observation = env.reset(seed=seed).observation
    for i in range(1, max_steps + 1):
        step = env.step(act_fn(observation))
        observation = step.observation
        progress = step.info["progress"]
        while len(crossings) < 2 and progress >= (len(crossings) + 1) * total:
            target = (len(crossings) + 1) * total
            frac = (target - prev_progress) / (progress - prev_progress)
            crossings.append(((i - 1) + frac) * DT)
        if len(crossings) == 2:
            return crossings[1] - crossings[0]
        prev_progress = progress
        if step.done:
            break
    return float("inf")


def policy_lap_time(agent: SacAgent, stats: NormStats, track_id: str = "oval",
                    seed: int = 0, max_steps: int = 6000,
                    track: TrackGeometry | None = None) -> float:
    config = EnvConfig(track=track_id, n_opponents=0, episode_steps=max_steps,
                       reward_kind="racing")
    env = RaceEnv(config, stats=stats, track=track)
    return _lap_time(env, deterministic_policy(agent), seed, max_steps)


def builtin_ai_lap_time(track_id: str = "oval", target_speed_scale: float = 0.9,
                        car: CarParams | None = None, seed: int = 0,
                        max_steps: int = 6000,
                        track: TrackGeometry | None = None) -> float:
    """Lap time of the rule-based controller driven through the same plant."""
    car = CarParams() if car is None else car
    config = EnvConfig(track=track_id, n_opponents=0, episode_steps=max_steps,
                       reward_kind="racing", target_speed_scale=target_speed_scale,
                       car=car)
    env = RaceEnv(config, stats=None, track=track)

    def act(_observation) -> Action:
        return builtin_ai_action(env.cars[0], env.track, target_speed_scale, car)

    return _lap_time(env, act, seed, max_steps)
