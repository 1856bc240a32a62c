"""2D multi-car racing simulator with curriculum soft actor-critic training."""

from .curriculum import (
    RunManifest,
    StageConfig,
    TrainerSession,
    benchmark_manifest,
    collect_parallel,
    run_stage,
    transition_stage,
)
from .env import DT, EnvConfig, RaceEnv, StepResult
from .errors import ConfigurationError, ContractViolation, UsageError
from .evaluation import (
    SETTINGS,
    EpisodeMetrics,
    EvalSetting,
    evaluate_agent,
    run_episode,
    summarize,
)
from .reward import RewardInputs, RewardWeights, overtaking_reward, racing_reward
from .sac import ReplayBuffer, SacAgent, Transition
from .sensing import LidarScan, NormStats, cast_lidar
from .track import TrackGeometry, bundled_track, load_track, save_track
from .vehicle import Action, CarParams, VehicleState, builtin_ai_action, step_vehicle

__version__ = "0.1.0"

__all__ = [
    "Action",
    "CarParams",
    "ConfigurationError",
    "ContractViolation",
    "DT",
    "EnvConfig",
    "EpisodeMetrics",
    "EvalSetting",
    "LidarScan",
    "NormStats",
    "RaceEnv",
    "ReplayBuffer",
    "RewardInputs",
    "RewardWeights",
    "RunManifest",
    "SETTINGS",
    "SacAgent",
    "StageConfig",
    "StepResult",
    "TrackGeometry",
    "TrainerSession",
    "Transition",
    "UsageError",
    "VehicleState",
    "benchmark_manifest",
    "builtin_ai_action",
    "bundled_track",
    "cast_lidar",
    "collect_parallel",
    "evaluate_agent",
    "load_track",
    "overtaking_reward",
    "racing_reward",
    "run_episode",
    "run_stage",
    "save_track",
    "step_vehicle",
    "summarize",
    "transition_stage",
    "__version__",
]
