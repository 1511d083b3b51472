"""Environment construction and manifest export."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import cartpole, highway, nav2d
from .core import EnvError, EnvManifest, Environment
from .tasks import ENV_IDS, TaskSpec, TaskSpecError, factor_schema, sample_task_specs

BASE_MANIFESTS: dict[str, EnvManifest] = {
    "nav2d": nav2d.MANIFEST,
    "cartpole": cartpole.MANIFEST,
    "highway_v0": highway.MANIFEST,
}

_ENV_CLASSES = {
    "nav2d": nav2d.Nav2DEnv,
    "cartpole": cartpole.CartPoleEnv,
    "highway_v0": highway.HighwayMergeEnv,
}


def make_env(spec: TaskSpec, seed: int, *, cartpole_reward_centered: bool = False,
             highway_reward_sign: str = "negate_deviation", highway_rear_term: str = "accel") -> Environment:
    """Environment for ``spec`` in its pre-reset state.

    Identical ``(spec, seed)`` pairs give identical episode streams.
    """
    if not isinstance(spec, TaskSpec):
        raise TaskSpecError(f"expected TaskSpec, got {type(spec).__name__}")
    if spec.env_id not in _ENV_CLASSES:
        raise EnvError(f"unknown env_id {spec.env_id!r}")
    if highway_reward_sign not in ("negate_deviation", "as_written"):
        raise EnvError(f"unknown highway_reward_sign {highway_reward_sign!r}")
    if highway_rear_term not in ("jerk", "accel"):
        raise EnvError(f"unknown highway_rear_term {highway_rear_term!r}")
    env = _ENV_CLASSES[spec.env_id](spec, seed)
    if spec.env_id == "cartpole":
        env.reward_centered = bool(cartpole_reward_centered)
    elif spec.env_id == "highway_v0":
        env.sign_mode = highway_reward_sign
        env.rear_term = highway_rear_term
    return env


def get_manifest(env_id: str, ranges: dict | None = None) -> EnvManifest:
    if env_id not in BASE_MANIFESTS:
        raise EnvError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}")
    base = BASE_MANIFESTS[env_id]
    return EnvManifest(**{**base.__dict__, "factors": factor_schema(env_id, ranges)})


def write_manifests(directory, ranges: dict | None = None) -> list[Path]:
    """Write one ``<env_id>.manifest`` key-value file per environment."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for env_id in ENV_IDS:
        path = directory / f"{env_id}.manifest"
        path.write_text(get_manifest(env_id, (ranges or {}).get(env_id)).to_text())
        paths.append(path)
    return paths


def transition_terminal(env_id: str, s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    """Genuine-termination flags for batched ``(s, s')`` pairs, judged from observations.

    Lets imagined rollouts stop where the real env would (pole fall, merge, ramp end).
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
    if env_id == "nav2d":
        return np.zeros(len(s), dtype=bool)
    if env_id == "cartpole":
        return (np.abs(s_next[:, 2]) >= cartpole.THETA_THRESHOLD) | (np.abs(s_next[:, 0]) >= cartpole.X_LIMIT)
    if env_id == "highway_v0":
        merged = (s[:, 0] != highway.MAIN_X) & (s_next[:, 0] == highway.MAIN_X)
        return merged | (s_next[:, 1] <= 0.0)
    raise EnvError(f"unknown env_id {env_id!r}")


def sample_initial_states(env_id: str, n: int, rng: np.random.Generator,
                          specs: list[TaskSpec] | None = None) -> np.ndarray:
    """``n`` draws from the env's reset distribution.

    The highway start depends on the traffic speed; without ``specs`` the
    factors are drawn uniformly from their ranges.
    """
    if env_id == "nav2d":
        return np.zeros((n, nav2d.MANIFEST.obs_dim))
    if env_id == "cartpole":
        return rng.uniform(-cartpole.INIT_BOUND, cartpole.INIT_BOUND, size=(n, 4))
    if env_id == "highway_v0":
        if specs is None:
            specs = sample_task_specs(env_id, n, rng)
        seeds = rng.integers(0, 2**31 - 1, size=n)
        return np.stack([make_env(sp, int(sd)).reset().observation for sp, sd in zip(specs, seeds)])
    raise EnvError(f"unknown env_id {env_id!r}")
