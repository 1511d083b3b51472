"""Cart-pole balancing with task-dependent gravity and push force."""
from __future__ import annotations

import math

import numpy as np

from .core import EnvManifest, Environment, EnvState

TAU = 0.02
HORIZON = 100
THETA_THRESHOLD = 0.418
X_LIMIT = 4.8
GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = MASS_POLE * HALF_LENGTH
INIT_BOUND = 0.05

MANIFEST = EnvManifest(
    env_id="cartpole",
    obs_names=("x", "x_dot", "theta", "theta_dot"),
    obs_low=(-X_LIMIT, -math.inf, -THETA_THRESHOLD, -math.inf),
    obs_high=(X_LIMIT, math.inf, THETA_THRESHOLD, math.inf),
    action_kind="discrete",
    action_dim=2,
    action_low=0.0,
    action_high=1.0,
    horizon=HORIZON,
    dt=TAU,
    reward_scale=1.0,
    normalize_obs=False,
    factors={},
)


def cartpole_reward(s, centered: bool = False) -> float:
    """``2 - 0.3 tanh|x| - 0.2 tanh|x'| - 0.3 tanh|theta - theta_thrd| - 0.2 tanh|theta'|``.

    ``centered=True`` replaces the angle term with ``tanh|theta|``.
    """
    x, x_dot, theta, theta_dot = (float(v) for v in s)
    angle = abs(theta) if centered else abs(theta - THETA_THRESHOLD)
    return (2.0 - 0.3 * math.tanh(abs(x)) - 0.2 * math.tanh(abs(x_dot))
            - 0.3 * math.tanh(angle) - 0.2 * math.tanh(abs(theta_dot)))


def cartpole_accelerations(s: np.ndarray, force: np.ndarray | float, gravity: float | np.ndarray):
    """Cart and pole accelerations ``(x_acc, theta_acc)`` for (batched) states."""
    s = np.asarray(s, dtype=np.float64)
    theta, theta_dot = s[..., 2], s[..., 3]
    cos, sin = np.cos(theta), np.sin(theta)
    temp = (force + POLE_MASS_LENGTH * theta_dot**2 * sin) / TOTAL_MASS
    theta_acc = (gravity * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos**2 / TOTAL_MASS))
    x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS
    return x_acc, theta_acc


def euler_integrate(s: np.ndarray, x_acc, theta_acc) -> np.ndarray:
    """Position from old velocity, velocity from acceleration."""
    s = np.asarray(s, dtype=np.float64)
    out = np.empty_like(s)
    out[..., 0] = s[..., 0] + TAU * s[..., 1]
    out[..., 1] = s[..., 1] + TAU * x_acc
    out[..., 2] = s[..., 2] + TAU * s[..., 3]
    out[..., 3] = s[..., 3] + TAU * theta_acc
    return out


class CartPoleEnv(Environment):
    manifest = MANIFEST
    reward_centered = False

    @property
    def gravity(self) -> float:
        return self.factors["gravity_scale"] * GRAVITY

    @property
    def force_mag(self) -> float:
        return self.factors["force_mag"]

    def _reset(self) -> EnvState:
        s = self.rng.uniform(-INIT_BOUND, INIT_BOUND, size=4)
        return EnvState(s, False, 0, {"terminal": False})

    def _step(self, action):
        s = self._state.observation
        force = self.force_mag if action == 1 else -self.force_mag
        x_acc, theta_acc = cartpole_accelerations(s, force, self.gravity)
        nxt = euler_integrate(s, x_acc, theta_acc)
        terminal = bool(abs(nxt[2]) > THETA_THRESHOLD or abs(nxt[0]) > X_LIMIT)
        obs = self.manifest.clip_obs(nxt)
        t = self._state.step_index + 1
        info = {"terminal": terminal, "x_acc": float(x_acc), "theta_acc": float(theta_acc)}
        reward = cartpole_reward(obs, centered=self.reward_centered)
        return EnvState(obs, terminal or t >= HORIZON, t, info), reward
