"""Point agent moving towards a hidden goal in the plane."""
from __future__ import annotations

import numpy as np

from .core import EnvManifest, Environment, EnvState

DT = 0.1
HORIZON = 100
POS_LIMIT = 4.0

MANIFEST = EnvManifest(
    env_id="nav2d",
    obs_names=("x", "y"),
    obs_low=(-POS_LIMIT, -POS_LIMIT),
    obs_high=(POS_LIMIT, POS_LIMIT),
    action_kind="continuous",
    action_dim=2,
    action_low=-1.0,
    action_high=1.0,
    horizon=HORIZON,
    dt=DT,
    reward_scale=1.0,
    normalize_obs=False,
    factors={},
)


def nav2d_reward(s, goal) -> float:
    s = np.asarray(s, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    return -float(np.sqrt(np.sum((s - goal) ** 2)))


def nav2d_transition(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Euler position update; works on single states or batches."""
    return np.clip(s + a * DT, -POS_LIMIT, POS_LIMIT)


class Nav2DEnv(Environment):
    manifest = MANIFEST

    @property
    def goal(self) -> np.ndarray:
        return np.array([self.factors["goal_x"], self.factors["goal_y"]])

    def _reset(self) -> EnvState:
        return EnvState(np.zeros(2), False, 0, {"terminal": False})

    def _step(self, action):
        s = self._state
        pos = nav2d_transition(s.observation, action)
        r = nav2d_reward(pos, self.goal)
        t = s.step_index + 1
        return EnvState(pos, t >= HORIZON, t, {"terminal": False}), r
