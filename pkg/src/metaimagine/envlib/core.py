"""Common environment interface and machine-readable env manifests."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tasks import TaskSpec, factor_schema


class EnvError(RuntimeError):
    pass


@dataclass
class EnvState:
    observation: np.ndarray
    done: bool
    step_index: int
    info: dict = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        """True only for genuine terminations, not horizon truncation."""
        return bool(self.info.get("terminal", False))


@dataclass(frozen=True)
class EnvManifest:
    env_id: str
    obs_names: tuple
    obs_low: tuple
    obs_high: tuple
    action_kind: str  # "continuous" | "discrete"
    action_dim: int  # continuous dims, or number of discrete actions
    action_low: float
    action_high: float
    horizon: int
    dt: float
    reward_scale: float
    normalize_obs: bool
    factors: dict

    @property
    def obs_dim(self) -> int:
        return len(self.obs_names)

    @property
    def discrete(self) -> bool:
        return self.action_kind == "discrete"

    @property
    def action_feature_dim(self) -> int:
        """Width of the action encoding fed to networks (one-hot if discrete)."""
        return self.action_dim

    def obs_center(self) -> np.ndarray:
        if not self.normalize_obs:
            return np.zeros(self.obs_dim)
        return 0.5 * (np.array(self.obs_low) + np.array(self.obs_high))

    def obs_halfwidth(self) -> np.ndarray:
        if not self.normalize_obs:
            return np.ones(self.obs_dim)
        return 0.5 * (np.array(self.obs_high) - np.array(self.obs_low))

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        if not self.normalize_obs:
            return np.asarray(obs, dtype=np.float64)
        return (np.asarray(obs, dtype=np.float64) - self.obs_center()) / self.obs_halfwidth()

    def denormalize(self, obs: np.ndarray) -> np.ndarray:
        if not self.normalize_obs:
            return np.asarray(obs, dtype=np.float64)
        return np.asarray(obs, dtype=np.float64) * self.obs_halfwidth() + self.obs_center()

    def clip_obs(self, obs: np.ndarray) -> np.ndarray:
        return np.clip(obs, self.obs_low, self.obs_high)

    def encode_actions(self, actions: np.ndarray) -> np.ndarray:
        """Network-facing action features: one-hot for discrete action spaces.

        Discrete actions are stored as a trailing column holding the index.
        """
        actions = np.asarray(actions)
        if self.discrete:
            idx = actions[..., 0].astype(np.int64)
            return np.eye(self.action_dim)[idx]
        return actions.astype(np.float64)

    @property
    def action_store_dim(self) -> int:
        return 1 if self.discrete else self.action_dim

    def to_text(self) -> str:
        lines = [
            f"env_id = {self.env_id}",
            f"obs_dim = {self.obs_dim}",
            f"obs_names = {','.join(self.obs_names)}",
            f"obs_low = {','.join(repr(float(v)) for v in self.obs_low)}",
            f"obs_high = {','.join(repr(float(v)) for v in self.obs_high)}",
            f"action_kind = {self.action_kind}",
            f"action_dim = {self.action_dim}",
            f"action_low = {self.action_low!r}",
            f"action_high = {self.action_high!r}",
            f"horizon = {self.horizon}",
            f"dt = {self.dt!r}",
            f"reward_scale = {self.reward_scale!r}",
            f"normalize_obs = {str(self.normalize_obs).lower()}",
        ]
        for k, (lo, hi) in self.factors.items():
            lines.append(f"factor.{k} = {lo!r},{hi!r}")
        return "\n".join(lines) + "\n"


def parse_manifest_text(text: str) -> dict:
    """Parse :meth:`EnvManifest.to_text` output back into a plain dict."""
    out: dict = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


class Environment:
    """Single-owner, seeded, task-parametrized episodic environment."""

    manifest: EnvManifest

    def __init__(self, spec: TaskSpec, seed: int):
        if spec.env_id != self.manifest.env_id:
            raise EnvError(f"spec for {spec.env_id} given to {self.manifest.env_id} environment")
        self.spec = spec
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._state: EnvState | None = None

    @property
    def factors(self) -> dict:
        return self.spec.factors

    def reset(self) -> EnvState:
        self._state = self._reset()
        return self._state

    def step(self, action) -> tuple[EnvState, float]:
        if self._state is None:
            raise EnvError("step() before reset()")
        if self._state.done:
            raise EnvError("step() after episode end; call reset()")
        action = self._check_action(action)
        state, reward = self._step(action)
        self._state = state
        return state, float(reward)

    def _check_action(self, action):
        m = self.manifest
        if m.discrete:
            a = np.asarray(action)
            if a.size != 1 or float(a.reshape(-1)[0]) != int(a.reshape(-1)[0]):
                raise EnvError(f"discrete action expected, got {action!r}")
            a = int(a.reshape(-1)[0])
            if not 0 <= a < m.action_dim:
                raise EnvError(f"action {a} outside 0..{m.action_dim - 1}")
            return a
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (m.action_dim,):
            raise EnvError(f"action must have {m.action_dim} dims, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < m.action_low) or np.any(a > m.action_high):
            raise EnvError(f"action {a} outside [{m.action_low}, {m.action_high}]")
        return a

    def _reset(self) -> EnvState:  # pragma: no cover - abstract
        raise NotImplementedError

    def _step(self, action) -> tuple[EnvState, float]:  # pragma: no cover - abstract
        raise NotImplementedError
