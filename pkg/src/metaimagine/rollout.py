"""Transition containers and lockstep rollout collection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envlib import EnvManifest, Environment

TAGS = ("R", "IR", "I")


@dataclass(frozen=True)
class ContextTuple:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray


@dataclass
class Trajectory:
    """Ordered transitions of one episode (or imagined rollout).

    Discrete actions are stored as a single column holding the action index.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    task_id: int = -1
    tag: str = "R"
    z: np.ndarray | None = None
    factors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown provenance tag {self.tag!r}")
        n = len(self.obs)
        if not (len(self.actions) == len(self.rewards) == len(self.next_obs) == len(self.terminals) == n):
            raise ValueError("trajectory arrays must share their leading length")

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))

    def tuples(self) -> list[ContextTuple]:
        return [ContextTuple(self.obs[t], self.actions[t], float(self.rewards[t]), self.next_obs[t])
                for t in range(len(self))]

    @classmethod
    def from_tuples(cls, tuples, **kw) -> "Trajectory":
        return cls(
            obs=np.array([t.s for t in tuples], dtype=np.float64),
            actions=np.array([np.atleast_1d(t.a) for t in tuples], dtype=np.float64),
            rewards=np.array([t.r for t in tuples], dtype=np.float64),
            next_obs=np.array([t.s_next for t in tuples], dtype=np.float64),
            terminals=np.zeros(len(tuples), dtype=bool),
            **kw,
        )

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.obs[start:stop], self.actions[start:stop], self.rewards[start:stop],
                          self.next_obs[start:stop], self.terminals[start:stop], self.task_id, self.tag,
                          self.z, self.factors)


def transition_features(manifest: EnvManifest, obs, actions, rewards, next_obs) -> np.ndarray:
    """Flattened, normalized ``(s, a, r, s')`` rows as fed to task encoders."""
    rewards = np.asarray(rewards, dtype=np.float64)[..., None] * manifest.reward_scale
    return np.concatenate([
        manifest.normalize(obs),
        manifest.encode_actions(actions),
        rewards,
        manifest.normalize(next_obs),
    ], axis=-1)


def feature_dim(manifest: EnvManifest) -> int:
    return 2 * manifest.obs_dim + manifest.action_feature_dim + 1


# highway exploration rarely merges so episodes last long enough to reveal the rear vehicle
_DISCRETE_PROBS = {"highway_v0": (0.3, 0.02, 0.08, 0.3, 0.3)}


class ExplorationPolicy:
    """Random actions held for ``hold`` consecutive steps.

    Holding actions spreads nav2d rollouts much further than i.i.d. noise.
    Discrete actions follow ``probs`` (uniform unless a per-env default exists).
    """

    def __init__(self, manifest: EnvManifest, hold: int = 10, probs=None):
        self.manifest = manifest
        self.hold = max(1, int(hold))
        if manifest.discrete:
            probs = probs if probs is not None else _DISCRETE_PROBS.get(manifest.env_id)
            probs = np.full(manifest.action_dim, 1.0 / manifest.action_dim) if probs is None else np.asarray(probs)
            if len(probs) != manifest.action_dim or np.any(probs < 0):
                raise ValueError("bad exploration action probabilities")
            probs = probs / probs.sum()
        self.probs = probs
        self._current = None
        self._age = None

    def reset(self, batch: int) -> None:
        self._current = None
        self._age = np.zeros(batch, dtype=int)

    def __call__(self, obs, z, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        b = len(obs)
        m = self.manifest
        if self._current is None or len(self._current) != b:
            self.reset(b)
            self._current = self._draw(b, rng)
        renew = self._age % self.hold == 0
        if renew.any():
            fresh = self._draw(b, rng)
            self._current[renew] = fresh[renew]
        self._age += 1
        return self._current.copy()

    def _draw(self, b: int, rng: np.random.Generator) -> np.ndarray:
        m = self.manifest
        if m.discrete:
            return rng.choice(m.action_dim, size=(b, 1), p=self.probs).astype(np.float64)
        return rng.uniform(m.action_low, m.action_high, size=(b, m.action_dim))


def env_action(manifest: EnvManifest, a: np.ndarray):
    return int(a[0]) if manifest.discrete else np.asarray(a, dtype=np.float64)


def collect_episodes(envs: list[Environment], policy, z: np.ndarray | None, rng: np.random.Generator,
                     max_steps: int | None = None, task_ids=None, tag: str = "R") -> list[Trajectory]:
    """Run one episode in each env, querying ``policy(obs, z, rng)`` once per step for all.

    ``z`` is ``(n_envs, M)`` or ``None``.  ``max_steps`` truncates early.
    """
    if not envs:
        return []
    manifest = envs[0].manifest
    n = len(envs)
    if hasattr(policy, "reset"):
        policy.reset(n)
    states = [e.reset() for e in envs]
    buf = [dict(obs=[], actions=[], rewards=[], next_obs=[], terminals=[]) for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    limit = max_steps if max_steps is not None else manifest.horizon
    t = 0
    while alive.any() and t < limit:
        obs = np.stack([s.observation for s in states])
        acts = np.asarray(policy(obs, z, rng), dtype=np.float64)
        if acts.ndim == 1:
            acts = acts[:, None]
        for i in np.nonzero(alive)[0]:
            nxt, r = envs[i].step(env_action(manifest, acts[i]))
            b = buf[i]
            b["obs"].append(states[i].observation)
            b["actions"].append(acts[i])
            b["rewards"].append(r)
            b["next_obs"].append(nxt.observation)
            b["terminals"].append(nxt.terminal)
            states[i] = nxt
            if nxt.done:
                alive[i] = False
        t += 1
    out = []
    for i, b in enumerate(buf):
        out.append(Trajectory(
            obs=np.array(b["obs"]), actions=np.array(b["actions"]), rewards=np.array(b["rewards"]),
            next_obs=np.array(b["next_obs"]), terminals=np.array(b["terminals"], dtype=bool),
            task_id=-1 if task_ids is None else int(task_ids[i]), tag=tag,
            factors=dict(envs[i].spec.factors),
        ))
    return out
