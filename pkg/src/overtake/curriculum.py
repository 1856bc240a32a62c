"""Staged training driver.

Runs the three-stage curriculum: racing alone, then overtaking one opponent,
then overtaking with harsher collision weights. Stage boundaries keep the
replay buffer and the learned action-mean head but reinitialize the policy's
exploration parameters (log-std head and temperature).

Experience comes from a bank of environment instances stepped in synchronized
rounds with batched policy inference; gradient updates are interleaved at a
fixed steps-per-update cadence. Everything is seeded through one SeedSequence
so a manifest replays to identical logs.
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .env import EnvConfig, RaceEnv, resolve_track
from .errors import ConfigurationError, ContractViolation
from .evaluation import SUCCESS_MARGIN, deterministic_policy, policy_lap_time
from .reward import RewardWeights
from .sac import ReplayBuffer, SacAgent, Transition, to_env_action
from .sensing import LAYOUT_HASH, Z_INDICES, NormStats, normalize_features

DEFAULT_EPOCH_STEPS = 20_000
DEFAULT_START_STEPS = 40_000
DEFAULT_STAGE_STEPS = (200_000, 150_000, 100_000)

EPOCH_COLUMNS = ["stage", "total_steps", "stage_steps", "eval_return_mean",
                 "eval_return_std", "success_rate", "lap_time", "alpha",
                 "buffer_size"]
UPDATE_COLUMNS = ["update", "critic1_loss", "critic2_loss", "policy_loss",
                  "alpha", "entropy", "buffer_size"]


@dataclass(frozen=True)
class StageConfig:
    """One curriculum phase: environment layout, reward, weights, budget."""

    stage: int
    reward_kind: str
    n_opponents: int
    steps: int
    weights: RewardWeights = RewardWeights()
    start_steps: int = 0
    carry_buffer: bool = True
    reinit_exploration: bool = True
    separation: float = 200.0
    episode_steps: int = 1000
    update_every: int = 20
    eval_every: int = DEFAULT_EPOCH_STEPS
    eval_episodes: int = 6
    checkpoint: str = ""

    def __post_init__(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ConfigurationError(f"stage id must be 1..3, got {self.stage}")
        if self.reward_kind not in ("racing", "overtaking"):
            raise ConfigurationError(f"unknown reward kind {self.reward_kind!r}")
        if self.stage == 1 and (self.reward_kind != "racing" or self.n_opponents != 0):
            raise ConfigurationError("stage 1 races alone with the racing reward")
        if self.stage >= 2 and (self.reward_kind != "overtaking" or self.n_opponents < 1):
            raise ConfigurationError(
                "stages 2 and 3 need the overtaking reward and at least one opponent")
        if self.steps < 0 or self.start_steps < 0:
            raise ConfigurationError("step budgets cannot be negative")
        if self.update_every < 1 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigurationError("cadence settings must be positive")

    @property
    def checkpoint_name(self) -> str:
        return self.checkpoint or f"stage{self.stage}.ckpt"


@dataclass(frozen=True)
class RunManifest:
    """A replayable training recipe: ordered stages plus run-wide settings."""

    stages: tuple[StageConfig, ...]
    seed: int = 0
    n_workers: int = 4
    cars_per_worker: int = 20
    track: str = "oval"
    target_speed_scale: float = 0.9
    name: str = "run"

    def __post_init__(self) -> None:
        if not self.stages:
            raise ConfigurationError("manifest needs at least one stage")
        ids = [s.stage for s in self.stages]
        if ids != list(range(ids[0], ids[0] + len(ids))):
            raise ConfigurationError(f"stage ids must be consecutive, got {ids}")
        if self.n_workers < 1 or self.cars_per_worker < 1:
            raise ConfigurationError("parallelism must be at least 1x1")
        for a, b in zip(self.stages, self.stages[1:]):
            if a.reward_kind == b.reward_kind == "overtaking":
                if (b.weights.wall_collision < a.weights.wall_collision
                        or b.weights.car_collision < a.weights.car_collision):
                    raise ConfigurationError(
                        "collision weights must not decrease across stages")

    @property
    def instances(self) -> int:
        return self.n_workers * self.cars_per_worker

    def to_file(self, path) -> None:
        cp = configparser.ConfigParser()
        cp["run"] = {
            "name": self.name,
            "seed": str(self.seed),
            "workers": str(self.n_workers),
            "cars_per_worker": str(self.cars_per_worker),
            "track": self.track,
            "target_speed_scale": repr(self.target_speed_scale),
        }
        for s in self.stages:
            cp[f"stage{s.stage}"] = {
                "reward": s.reward_kind,
                "opponents": str(s.n_opponents),
                "steps": str(s.steps),
                "start_steps": str(s.start_steps),
                "wall_weight": repr(s.weights.wall_collision),
                "car_weight": repr(s.weights.car_collision),
                "relative_weight": repr(s.weights.relative_progress),
                "detection_range": repr(s.weights.detection_range),
                "carry_buffer": str(s.carry_buffer).lower(),
                "reinit_exploration": str(s.reinit_exploration).lower(),
                "separation": repr(s.separation),
                "episode_steps": str(s.episode_steps),
                "update_every": str(s.update_every),
                "eval_every": str(s.eval_every),
                "eval_episodes": str(s.eval_episodes),
                "checkpoint": s.checkpoint_name,
            }
        with open(path, "w") as f:
            cp.write(f)

    @classmethod
    def from_file(cls, path) -> "RunManifest":
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise ConfigurationError(f"cannot read manifest {path}")
        if "run" not in cp:
            raise ConfigurationError(f"{path}: missing [run] section")
        run = cp["run"]
        stage_names = sorted(
            (name for name in cp.sections() if name.startswith("stage")),
            key=lambda n: int(n[5:]))
        if not stage_names:
            raise ConfigurationError(f"{path}: no [stageN] sections")
        stages = []
        for name in stage_names:
            sec = cp[name]
            weights = RewardWeights(
                wall_collision=sec.getfloat("wall_weight", 0.005),
                car_collision=sec.getfloat("car_weight", 0.005),
                relative_progress=sec.getfloat("relative_weight", 1.0),
                detection_range=sec.getfloat("detection_range", 30.0),
            )
            stages.append(StageConfig(
                stage=int(name[5:]),
                reward_kind=sec.get("reward", "racing"),
                n_opponents=sec.getint("opponents", 0),
                steps=sec.getint("steps"),
                weights=weights,
                start_steps=sec.getint("start_steps", 0),
                carry_buffer=sec.getboolean("carry_buffer", True),
                reinit_exploration=sec.getboolean("reinit_exploration", True),
                separation=sec.getfloat("separation", 200.0),
                episode_steps=sec.getint("episode_steps", 1000),
                update_every=sec.getint("update_every", 20),
                eval_every=sec.getint("eval_every", DEFAULT_EPOCH_STEPS),
                eval_episodes=sec.getint("eval_episodes", 6),
                checkpoint=sec.get("checkpoint", ""),
            ))
        return cls(
            stages=tuple(stages),
            seed=run.getint("seed", 0),
            n_workers=run.getint("workers", 4),
            cars_per_worker=run.getint("cars_per_worker", 20),
            track=run.get("track", "oval"),
            target_speed_scale=run.getfloat("target_speed_scale", 0.9),
            name=run.get("name", "run"),
        )


def benchmark_stages(variant: int, stage_steps=None,
                     start_steps: int = DEFAULT_START_STEPS,
                     **common) -> tuple[StageConfig, ...]:
    """Stage lists for the three benchmark agents.

    Variant 1 trains stages 1-2; variants 2 and 3 add a third stage, with
    collision weights held at 0.005 for variant 2 and raised to 0.01 for
    variant 3.
    """
    if variant not in (1, 2, 3):
        raise ConfigurationError(f"unknown agent variant {variant}")
    n_stages = 2 if variant == 1 else 3
    steps = DEFAULT_STAGE_STEPS[:n_stages] if stage_steps is None else stage_steps
    if len(steps) != n_stages:
        raise ConfigurationError(
            f"variant {variant} needs {n_stages} stage budgets, got {len(steps)}")
    base = RewardWeights()
    stage3_weights = base if variant == 2 else replace(
        base, wall_collision=0.01, car_collision=0.01)
    stages = [
        StageConfig(stage=1, reward_kind="racing", n_opponents=0,
                    steps=steps[0], weights=base, start_steps=start_steps,
                    **common),
        StageConfig(stage=2, reward_kind="overtaking", n_opponents=1,
                    steps=steps[1], weights=base, **common),
    ]
    if n_stages == 3:
        stages.append(StageConfig(stage=3, reward_kind="overtaking",
                                  n_opponents=1, steps=steps[2],
                                  weights=stage3_weights, **common))
    return tuple(stages)


def benchmark_manifest(variant: int, seed: int = 0, track: str = "oval",
                       stage_steps=None, start_steps: int = DEFAULT_START_STEPS,
                       n_workers: int = 4, cars_per_worker: int = 20,
                       **common) -> RunManifest:
    return RunManifest(
        stages=benchmark_stages(variant, stage_steps, start_steps, **common),
        seed=seed,
        n_workers=n_workers,
        cars_per_worker=cars_per_worker,
        track=track,
        name=f"agent{variant}",
    )


def transition_stage(agent: SacAgent, from_stage: StageConfig,
                     to_stage: StageConfig) -> SacAgent:
    """Stage-boundary surgery on the agent.

    Resets only the exploration parameters (policy log-std head, temperature);
    the action-mean head, critics and optimizer state for everything else are
    preserved. Buffer retention is the session's job since the buffer does not
    live on the agent.
    """
    if to_stage.stage != from_stage.stage + 1:
        raise ContractViolation(
            f"stages must be consecutive, got {from_stage.stage} -> {to_stage.stage}")
    if to_stage.reinit_exploration:
        agent.reinit_exploration()
    return agent


def _stratified_start(track_length: float, slot: int, n_slots: int,
                      rng: np.random.Generator) -> float:
    return track_length * (slot + float(rng.uniform())) / n_slots


def collect_parallel(act_fn, envs, n_steps: int,
                     rng: np.random.Generator | None = None) -> list[Transition]:
    """Synchronized-round collection across environment instances.

    act_fn maps a batch of observations (n, 96) to policy-space actions
    (n, 2). Instances reset with stratified start positions so initial arc
    lengths spread over the whole track; finished episodes reset in place.
    Returns exactly n_steps transitions in arrival (round-robin) order.
    """
    if not envs:
        raise ContractViolation("need at least one environment instance")
    rng = np.random.default_rng(rng)
    n_envs = len(envs)
    length = envs[0].track.total_length
    obs = []
    for i, env in enumerate(envs):
        res = env.reset(seed=int(rng.integers(2**31)),
                        start_cp=_stratified_start(length, i, n_envs, rng))
        obs.append(res.observation)
    out: list[Transition] = []
    while len(out) < n_steps:
        active = min(n_envs, n_steps - len(out))
        actions = act_fn(np.asarray(obs[:active]))
        for i in range(active):
            res = envs[i].step(to_env_action(actions[i]))
            out.append(Transition(obs[i], np.asarray(actions[i], dtype=np.float32),
                                  res.reward, res.observation, res.done))
            if res.done:
                res = envs[i].reset(seed=int(rng.integers(2**31)),
                                    start_cp=_stratified_start(length, i, n_envs, rng))
            obs[i] = res.observation
    return out


class _Instance:
    """One environment plus its private reset stream and start slot."""

    def __init__(self, env: RaceEnv, rng: np.random.Generator, slot: int,
                 n_slots: int):
        self.env = env
        self.rng = rng
        self.slot = slot
        self.n_slots = n_slots
        self.raw_obs: np.ndarray | None = None

    def reset(self) -> None:
        start = _stratified_start(self.env.track.total_length, self.slot,
                                  self.n_slots, self.rng)
        res = self.env.reset(seed=int(self.rng.integers(2**31)), start_cp=start)
        self.raw_obs = res.observation


class TrainerSession:
    """Owns the agent, replay buffer, normalization stats and RNG streams."""

    def __init__(self, manifest: RunManifest, out_dir,
                 agent: SacAgent | None = None,
                 buffer: ReplayBuffer | None = None,
                 stats: NormStats | None = None):
        self.manifest = manifest
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.track = resolve_track(manifest.track)
        root = np.random.SeedSequence(manifest.seed)
        agent_ss, collect_ss, eval_ss, reset_ss = root.spawn(4)
        self.agent = SacAgent(seed=agent_ss) if agent is None else agent
        self.buffer = ReplayBuffer() if buffer is None else buffer
        self.stats = NormStats() if stats is None else stats
        self.collect_rng = np.random.default_rng(collect_ss)
        self.eval_rng = np.random.default_rng(eval_ss)
        self._reset_root = reset_ss
        self.total_steps = 0
        self.updates_done = 0
        self.epoch_rows: list[dict] = []

    # -- top level --------------------------------------------------------------

    def run(self) -> list[dict]:
        """Run every stage of the manifest in order; returns the epoch log."""
        manifest_path = self.out_dir / "manifest.ini"
        self.manifest.to_file(manifest_path)
        previous = None
        for stage in self.manifest.stages:
            if previous is not None:
                transition_stage(self.agent, previous, stage)
                if not stage.carry_buffer:
                    self.buffer = ReplayBuffer(capacity=self.buffer.capacity)
            self.run_stage(stage)
            previous = stage
        self._write_rows(self.out_dir / "epochs.csv", EPOCH_COLUMNS,
                         self.epoch_rows)
        return self.epoch_rows

    # -- one stage --------------------------------------------------------------

    def run_stage(self, stage: StageConfig) -> list[dict]:
        config = self._stage_config(stage)
        n = self.manifest.instances
        streams = self._reset_root.spawn(n)
        instances = [
            _Instance(RaceEnv(config, stats=None, track=self.track),
                      np.random.default_rng(streams[i]), i, n)
            for i in range(n)
        ]
        for inst in instances:
            inst.reset()

        rows: list[dict] = []
        update_log: list[dict] = []
        collected = 0
        if not self.stats.frozen:
            if stage.start_steps <= 0:
                raise ConfigurationError(
                    "normalization stats are unfrozen and the stage has no "
                    "start-step warmup configured")
            collected = self._warmup(stage, instances)

        pending = 0
        next_eval = (collected // stage.eval_every + 1) * stage.eval_every
        while collected < stage.steps:
            active = instances[:min(n, stage.steps - collected)]
            batch_raw = np.asarray([inst.raw_obs for inst in active])
            batch_norm = normalize_features(batch_raw, self.stats)
            actions = self.agent.act_batch(batch_norm.astype(np.float32),
                                           mode="stochastic", rng=self.collect_rng)
            next_raw = np.empty_like(batch_raw)
            rewards = np.empty(len(active), dtype=np.float32)
            for i, inst in enumerate(active):
                res = inst.env.step(to_env_action(actions[i]))
                next_raw[i] = res.observation
                rewards[i] = res.reward
                if res.done:
                    inst.reset()
                else:
                    inst.raw_obs = res.observation
            # episode-limit truncation is not a terminal state of the task,
            # so bootstrapping continues through it (done stays 0)
            self.buffer.push_many(
                batch_norm.astype(np.float32),
                actions.astype(np.float32),
                rewards,
                normalize_features(next_raw, self.stats).astype(np.float32),
                np.zeros(len(active), dtype=np.float32),
            )
            collected += len(active)
            self.total_steps += len(active)
            pending += len(active)

            n_updates, pending = divmod(pending, stage.update_every)
            for _ in range(n_updates):
                if len(self.buffer) >= self.agent.batch_size:
                    diag = self.agent.update(self.buffer)
                    self.updates_done += 1
                    diag["update"] = self.updates_done
                    update_log.append(diag)

            if collected >= next_eval and collected < stage.steps:
                rows.append(self._evaluate(stage, config, collected))
                next_eval += stage.eval_every

        if stage.steps > 0:
            rows.append(self._evaluate(stage, config, collected))
        self.agent.save(self.out_dir / stage.checkpoint_name, LAYOUT_HASH)
        self._write_rows(self.out_dir / f"stage{stage.stage}_updates.csv",
                         UPDATE_COLUMNS, update_log)
        self._write_rows(self.out_dir / f"stage{stage.stage}_epochs.csv",
                         EPOCH_COLUMNS, rows)
        self.epoch_rows.extend(rows)
        return rows

    # -- pieces -----------------------------------------------------------------

    def _stage_config(self, stage: StageConfig) -> EnvConfig:
        return EnvConfig(
            track=self.manifest.track,
            n_opponents=stage.n_opponents,
            initial_separation=stage.separation,
            episode_steps=stage.episode_steps,
            weights=stage.weights,
            reward_kind=stage.reward_kind,
            target_speed_scale=self.manifest.target_speed_scale,
        )

    def _warmup(self, stage: StageConfig, instances) -> int:
        """Uniform-random action phase that feeds the normalization stats.

        The transitions are staged raw and only enter the replay buffer once
        the stats freeze, so every stored observation is normalized with the
        same statistics.
        """
        staged_obs, staged_act, staged_rew, staged_next = [], [], [], []
        collected = 0
        target = min(stage.start_steps, stage.steps)
        while collected < target:
            active = instances[:min(len(instances), target - collected)]
            batch_raw = np.asarray([inst.raw_obs for inst in active])
            self.stats.update(batch_raw[:, Z_INDICES])
            actions = np.stack([
                inst.rng.uniform(-1.0, 1.0, size=2) for inst in active
            ]).astype(np.float32)
            next_raw = np.empty_like(batch_raw)
            rewards = np.empty(len(active), dtype=np.float32)
            for i, inst in enumerate(active):
                res = inst.env.step(to_env_action(actions[i]))
                next_raw[i] = res.observation
                rewards[i] = res.reward
                if res.done:
                    inst.reset()
                else:
                    inst.raw_obs = res.observation
            staged_obs.append(batch_raw)
            staged_act.append(actions)
            staged_rew.append(rewards)
            staged_next.append(next_raw)
            collected += len(active)
            self.total_steps += len(active)
        self.stats.freeze()
        self.stats.save(self.out_dir / "norm.stats")
        obs = normalize_features(np.concatenate(staged_obs), self.stats)
        nxt = normalize_features(np.concatenate(staged_next), self.stats)
        self.buffer.push_many(
            obs.astype(np.float32),
            np.concatenate(staged_act),
            np.concatenate(staged_rew),
            nxt.astype(np.float32),
            np.zeros(len(obs), dtype=np.float32),
        )
        return collected

    def _evaluate(self, stage: StageConfig, config: EnvConfig,
                  collected: int) -> dict:
        seeds = [int(s) for s in
                 self.eval_rng.integers(0, 2**31 - 1, size=stage.eval_episodes)]
        env = RaceEnv(config, stats=self.stats, track=self.track)
        act = deterministic_policy(self.agent)
        returns = []
        successes = 0
        for seed in seeds:
            res = env.reset(seed=seed)
            total = 0.0
            succeeded = False
            while not res.done:
                res = env.step(act(res.observation))
                total += res.reward
                if (res.info["lead"]
                        and min(res.info["lead"]) >= SUCCESS_MARGIN):
                    succeeded = True
                    break
            returns.append(total)
            successes += succeeded
        lap_seed = int(self.eval_rng.integers(0, 2**31 - 1))
        lap = policy_lap_time(self.agent, self.stats,
                              track_id=self.manifest.track, seed=lap_seed,
                              track=self.track)
        row = {
            "stage": stage.stage,
            "total_steps": self.total_steps,
            "stage_steps": collected,
            "eval_return_mean": float(np.mean(returns)),
            "eval_return_std": float(np.std(returns)),
            "success_rate": (successes / len(seeds)) if stage.n_opponents else 0.0,
            "lap_time": lap,
            "alpha": self.agent.alpha,
            "buffer_size": len(self.buffer),
        }
        return row

    @staticmethod
    def _write_rows(path, columns, rows) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(row[c]) for c in columns])


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def run_stage(agent: SacAgent, stage: StageConfig, manifest: RunManifest,
              out_dir, buffer: ReplayBuffer | None = None,
              stats: NormStats | None = None):
    """Single-stage entry point; returns (agent, epoch rows)."""
    session = TrainerSession(manifest, out_dir, agent=agent, buffer=buffer,
                             stats=stats)
    rows = session.run_stage(stage)
    return agent, rows
