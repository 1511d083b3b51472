"""Task-parametrized simulation environments."""
from .cartpole import THETA_THRESHOLD, CartPoleEnv, cartpole_reward
from .core import EnvError, EnvManifest, Environment, EnvState, parse_manifest_text
from .highway import HighwayMergeEnv, highway_reward
from .idm import IdmParams, desired_gap, idm_acceleration, proportional_acceleration
from .nav2d import Nav2DEnv, nav2d_reward
from .registry import get_manifest, make_env, sample_initial_states, transition_terminal, write_manifests
from .tasks import (
    ENV_IDS,
    FACTOR_SCHEMAS,
    TaskSpec,
    TaskSpecError,
    factor_schema,
    grid_shape,
    grid_task_specs,
    hull_task_specs,
    sample_task_specs,
)

__all__ = [
    "THETA_THRESHOLD",
    "CartPoleEnv",
    "cartpole_reward",
    "EnvError",
    "EnvManifest",
    "Environment",
    "EnvState",
    "parse_manifest_text",
    "HighwayMergeEnv",
    "highway_reward",
    "IdmParams",
    "desired_gap",
    "idm_acceleration",
    "proportional_acceleration",
    "Nav2DEnv",
    "nav2d_reward",
    "get_manifest",
    "make_env",
    "write_manifests",
    "sample_initial_states",
    "transition_terminal",
    "ENV_IDS",
    "FACTOR_SCHEMAS",
    "TaskSpec",
    "TaskSpecError",
    "factor_schema",
    "grid_shape",
    "grid_task_specs",
    "hull_task_specs",
    "sample_task_specs",
]
