"""Task-conditioned soft actor-critic and a provenance-tagged replay buffer.

The latent task vector ``z`` enters every network as a plain numpy input, so
policy losses can never push gradients into the encoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envlib import EnvManifest
from .nncore import Mlp, MlpSpec, ParameterStore, Tensor, ad, adam_update, backward, clip_grad_norm, mlp_forward
from .rollout import TAGS, Trajectory

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


# -- replay buffer ---------------------------------------------------------
@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    tags: np.ndarray
    tasks: np.ndarray
    z: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)


class _TaskStore:
    def __init__(self, obs_dim: int, act_dim: int, latent_dim: int, capacity: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.tags = np.zeros(capacity, dtype=np.int8)
        self.z = np.full((capacity, latent_dim), np.nan)
        self.stamp = np.zeros(capacity, dtype=np.int64)  # insertion counter, orders the ring
        self.count = 0
        self.pos = 0
        self.total = 0

    def add(self, obs, act, rew, nxt, term, tag: int, z) -> None:
        i = self.pos
        self.obs[i], self.actions[i], self.rewards[i] = obs, act, rew
        self.next_obs[i], self.terminals[i], self.tags[i] = nxt, term, tag
        self.z[i] = np.nan if z is None else z
        self.stamp[i] = self.total
        self.total += 1
        self.pos = (self.pos + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def indices(self, tag_codes=None, recent: int | None = None) -> np.ndarray:
        idx = np.arange(self.count)
        if recent is not None:
            idx = idx[self.stamp[idx] >= self.total - recent]
        if tag_codes is not None:
            idx = idx[np.isin(self.tags[idx], tag_codes)]
        return idx


class ReplayBuffer:
    """Per-task ring buffers whose rows keep their provenance tag (R, IR or I).

    ``recent`` is the size of the per-task window of most recently added
    tuples, which is what task-inference contexts are drawn from.
    """

    def __init__(self, obs_dim: int, action_dim: int, latent_dim: int = 4, capacity: int = 100_000,
                 recent: int = 400):
        if capacity < 1 or recent < 1:
            raise ValueError("capacity and recent window must be positive")
        self.obs_dim, self.action_dim, self.latent_dim = obs_dim, action_dim, latent_dim
        self.capacity = capacity
        self.recent = recent
        self._stores: dict = {}

    @classmethod
    def for_manifest(cls, manifest: EnvManifest, latent_dim: int = 4, **kw) -> "ReplayBuffer":
        return cls(manifest.obs_dim, manifest.action_store_dim, latent_dim, **kw)

    def tasks(self) -> list:
        return list(self._stores)

    def _store(self, task) -> _TaskStore:
        if task not in self._stores:
            self._stores[task] = _TaskStore(self.obs_dim, self.action_dim, self.latent_dim, self.capacity)
        return self._stores[task]

    def add(self, task, obs, action, reward, next_obs, terminal, tag: str = "R", z=None) -> None:
        if tag not in TAGS:
            raise ValueError(f"unknown provenance tag {tag!r}")
        self._store(task).add(obs, np.atleast_1d(action), reward, next_obs, bool(terminal), TAGS.index(tag), z)

    def add_trajectory(self, traj: Trajectory, task=None) -> None:
        task = traj.task_id if task is None else task
        store = self._store(task)
        code = TAGS.index(traj.tag)
        for t in range(len(traj)):
            store.add(traj.obs[t], traj.actions[t], traj.rewards[t], traj.next_obs[t], traj.terminals[t],
                      code, traj.z)

    @staticmethod
    def _codes(source):
        if source is None:
            return None
        source = (source,) if isinstance(source, str) else tuple(source)
        for s in source:
            if s not in TAGS:
                raise ValueError(f"unknown provenance tag {s!r}")
        return [TAGS.index(s) for s in source]

    def count(self, task=None, source=None, recent_only: bool = False) -> int:
        codes = self._codes(source)
        keys = self.tasks() if task is None else ([task] if task in self._stores else [])
        return int(sum(len(self._stores[k].indices(codes, self.recent if recent_only else None)) for k in keys))

    def sample(self, n: int, rng: np.random.Generator, task=None, source=None,
               recent_only: bool = False, ordered: bool = False) -> Batch:
        """Uniform sample without replacement across the selected tasks.

        ``ordered=True`` returns rows in insertion order (for recurrent contexts).
        """
        codes = self._codes(source)
        keys = [k for k in (self.tasks() if task is None else [task]) if k in self._stores]
        owners, rows_idx, stamps = [], [], []
        for j, k in enumerate(keys):
            st = self._stores[k]
            idx = st.indices(codes, self.recent if recent_only else None)
            owners.append(np.full(len(idx), j))
            rows_idx.append(idx)
            stamps.append(st.stamp[idx])
        total = int(sum(len(i) for i in rows_idx))
        if n > total:
            raise ValueError(f"requested {n} tuples but only {total} match the filter")
        if total:
            owners, rows_idx, stamps = np.concatenate(owners), np.concatenate(rows_idx), np.concatenate(stamps)
        pick = rng.choice(total, size=n, replace=False) if n > 0 else np.zeros(0, dtype=int)
        if ordered and n > 0:
            pick = pick[np.argsort(stamps[pick], kind="stable")]
        out = {f: [] for f in ("obs", "actions", "rewards", "next_obs", "terminals", "tags", "z", "tasks")}
        order = []
        for j, k in enumerate(keys):
            sel = pick[owners[pick] == j] if n > 0 else pick
            if len(sel) == 0:
                continue
            st, i = self._stores[k], rows_idx[sel]
            order.append(np.nonzero(owners[pick] == j)[0])
            for f in ("obs", "actions", "rewards", "next_obs", "terminals", "z"):
                out[f].append(getattr(st, f)[i])
            out["tags"].append(np.array(TAGS, dtype=object)[st.tags[i]])
            out["tasks"].append(np.array([k] * len(i), dtype=object))
        inv = np.argsort(np.concatenate(order)) if order else np.zeros(0, dtype=int)

        def cat(f, shape):
            return np.concatenate(out[f])[inv] if out[f] else np.zeros(shape)

        return Batch(
            obs=cat("obs", (0, self.obs_dim)),
            actions=cat("actions", (0, self.action_dim)),
            rewards=cat("rewards", (0,)),
            next_obs=cat("next_obs", (0, self.obs_dim)),
            terminals=cat("terminals", (0,)).astype(bool),
            tags=cat("tags", (0,)).astype(object),
            tasks=cat("tasks", (0,)).astype(object),
            z=cat("z", (0, self.latent_dim)),
        )

    def clear(self, source=None) -> None:
        """Drop every task holding only tuples of the given tags (all tasks if ``None``)."""
        if source is None:
            self._stores.clear()
            return
        codes = self._codes(source)
        for k in list(self._stores):
            st = self._stores[k]
            if np.all(np.isin(st.tags[:st.count], codes)):
                del self._stores[k]


# -- soft actor-critic -------------------------------------------------------
@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    alpha_ent: float = 0.2
    batch_size: int = 256
    lr_real: float = 3e-4
    lr_imag: float = 3e-4
    hidden: int | None = None
    grad_clip: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.alpha_ent < 0 or self.batch_size < 1 or self.lr_real <= 0 or self.lr_imag < 0:
            raise ValueError("invalid SAC hyperparameters")


def squash_log_prob(u: Tensor, mean: Tensor, log_std: Tensor, eps: np.ndarray) -> Tensor:
    """Exact log-density of ``tanh(u)`` for ``u = mean + exp(log_std) * eps``, summed over dims."""
    gauss = -0.5 * eps**2 - log_std - _HALF_LOG_2PI
    # log(1 - tanh(u)^2) written stably
    log_det = 2.0 * (np.log(2.0) - u - ad.softplus(-2.0 * u))
    return (gauss - log_det).sum(axis=-1)


class SacAgent:
    """Actor, twin critics and target critics for one environment family."""

    def __init__(self, manifest: EnvManifest, latent_dim: int = 4, config: SacConfig | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.manifest = manifest
        self.latent_dim = int(latent_dim)
        self.config = config or SacConfig()
        h = self.config.hidden or (128 if manifest.env_id == "highway_v0" else 64)
        d, m = manifest.obs_dim, self.latent_dim
        self.discrete = manifest.discrete
        n_act = manifest.action_dim
        self.actor = ParameterStore("actor")
        self.critic = ParameterStore("critic")
        if self.discrete:
            self.pi = Mlp(self.actor, "pi", MlpSpec((d + m, h, h, n_act), "relu"), rng, out_init_scale=0.1)
            q_in, q_out = d + m, n_act
        else:
            self.pi = Mlp(self.actor, "pi", MlpSpec((d + m, h, h, 2 * n_act), "relu"), rng, out_init_scale=0.1)
            q_in, q_out = d + m + n_act, 1
        self.q1 = Mlp(self.critic, "q1", MlpSpec((q_in, h, h, q_out), "relu"), rng)
        self.q2 = Mlp(self.critic, "q2", MlpSpec((q_in, h, h, q_out), "relu"), rng)
        self.target = self.critic.clone("critic_target")
        self.updates = 0

    # -- forward pieces --------------------------------------------------
    def _state_in(self, obs, z) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = np.broadcast_to(z, (len(obs), self.latent_dim))
        return np.concatenate([self.manifest.normalize(obs), z], axis=-1)

    def _q(self, store: ParameterStore, x) -> tuple[Tensor, Tensor]:
        spec = self.q1.spec
        return mlp_forward(store, spec, x, "q1"), mlp_forward(store, spec, x, "q2")

    def actor_params(self, obs, z) -> tuple[Tensor, Tensor]:
        """Continuous: ``(mean, log_std)``; discrete: ``(logits, log_probs)``."""
        out = self.pi(self._state_in(obs, z))
        if self.discrete:
            return out, ad.log_softmax(out, axis=-1)
        a = self.manifest.action_dim
        raw_std = out[:, a:]
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (ad.tanh(raw_std) + 1.0)
        return out[:, :a], log_std

    def sample_action(self, obs, z, rng: np.random.Generator, deterministic: bool = False,
                      eps: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Action tensor and its log-probability.

        Continuous actions are ``tanh`` of a reparameterized Gaussian; discrete
        actions come back as an index column.
        """
        if self.discrete:
            _, logp = self.actor_params(obs, z)
            probs = np.exp(logp.data)
            if deterministic:
                idx = np.argmax(probs, axis=-1)
            else:
                cum = np.cumsum(probs, axis=-1)
                u = rng.random((len(probs), 1)) * cum[:, -1:]
                idx = np.minimum((cum < u).sum(axis=-1), probs.shape[-1] - 1)
            chosen = logp[np.arange(len(idx)), idx]
            return ad.as_tensor(idx[:, None].astype(np.float64)), chosen
        mean, log_std = self.actor_params(obs, z)
        if eps is None:
            eps = np.zeros(mean.shape) if deterministic else rng.standard_normal(mean.shape)
        u = mean + ad.exp(log_std) * eps
        return ad.tanh(u), squash_log_prob(u, mean, log_std, eps)

    def act(self, obs, z, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        a, _ = self.sample_action(obs, z, rng, deterministic)
        return a.data.copy()

    __call__ = act

    def q_values(self, obs, actions, z, store: ParameterStore | None = None):
        """Twin critic outputs: ``(B,)`` for continuous, ``(B, n_actions)`` for discrete."""
        store = store if store is not None else self.critic
        x = self._state_in(obs, z)
        if self.discrete:
            return self._q(store, x)
        q1, q2 = self._q(store, ad.concat([ad.as_tensor(x), ad.as_tensor(actions)], axis=-1))
        return q1[:, 0], q2[:, 0]

    # -- losses ----------------------------------------------------------
    def target_values(self, batch: Batch, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Soft Bellman targets; only genuine terminals stop the bootstrap."""
        cfg = self.config
        if self.discrete:
            _, logp = self.actor_params(batch.next_obs, z)
            p = np.exp(logp.data)
            tq1, tq2 = self.q_values(batch.next_obs, None, z, self.target)
            v = (p * (np.minimum(tq1.data, tq2.data) - cfg.alpha_ent * logp.data)).sum(axis=-1)
        else:
            a_next, logp = self.sample_action(batch.next_obs, z, rng)
            tq1, tq2 = self.q_values(batch.next_obs, a_next.data, z, self.target)
            v = np.minimum(tq1.data, tq2.data) - cfg.alpha_ent * logp.data
        r = batch.rewards * self.manifest.reward_scale
        return r + cfg.gamma * (1.0 - batch.terminals.astype(np.float64)) * v

    def critic_loss(self, batch: Batch, z: np.ndarray, rng: np.random.Generator,
                    target: np.ndarray | None = None) -> Tensor:
        if len(batch) == 0:
            raise ValueError("critic loss on an empty batch")
        y = self.target_values(batch, z, rng) if target is None else np.asarray(target, dtype=np.float64)
        q1, q2 = self.q_values(batch.obs, self._action_input(batch.actions), z)
        if self.discrete:
            onehot = self.manifest.encode_actions(batch.actions)
            q1, q2 = (q1 * onehot).sum(axis=-1), (q2 * onehot).sum(axis=-1)
        return (ad.square(q1 - y) + ad.square(q2 - y)).mean()

    def _action_input(self, actions):
        return None if self.discrete else np.asarray(actions, dtype=np.float64)

    def actor_loss(self, batch: Batch, z: np.ndarray, rng: np.random.Generator,
                   eps: np.ndarray | None = None) -> Tensor:
        """``E[alpha * log pi - min Q]``; exact expectation over actions when discrete."""
        if len(batch) == 0:
            raise ValueError("actor loss on an empty batch")
        alpha = self.config.alpha_ent
        if self.discrete:
            _, logp = self.actor_params(batch.obs, z)
            q1, q2 = self.q_values(batch.obs, None, z)
            q = np.minimum(q1.data, q2.data)
            return (ad.exp(logp) * (alpha * logp - q)).sum(axis=-1).mean()
        a, logp = self.sample_action(batch.obs, z, rng, eps=eps)
        q1, q2 = self.q_values(batch.obs, a, z)
        return (alpha * logp - ad.minimum(q1, q2)).mean()

    # -- updates ---------------------------------------------------------
    def update(self, real: tuple[Batch, np.ndarray], rng: np.random.Generator,
               imag: tuple[Batch, np.ndarray] | None = None) -> dict:
        """One critic step, one actor step and a target soft update.

        Real and imaginary losses are summed with the imaginary term weighted
        by ``lr_imag / lr_real``, so one optimizer step applies
        ``lr_real * grad_R + lr_imag * grad_I``.
        """
        cfg = self.config
        w_imag = cfg.lr_imag / cfg.lr_real
        parts = [(real, 1.0)] + ([(imag, w_imag)] if imag is not None and len(imag[0]) and w_imag > 0 else [])

        self.critic.zero_grad()
        c_loss = None
        for (batch, z), w in parts:
            term = self.critic_loss(batch, z, rng) * w
            c_loss = term if c_loss is None else c_loss + term
        backward(c_loss)
        clip_grad_norm([self.critic], cfg.grad_clip)
        adam_update(self.critic, cfg.lr_real)

        self.actor.zero_grad()
        a_loss = None
        for (batch, z), w in parts:
            term = self.actor_loss(batch, z, rng) * w
            a_loss = term if a_loss is None else a_loss + term
        backward(a_loss)
        self.critic.zero_grad()  # actor loss must not move the critics
        clip_grad_norm([self.actor], cfg.grad_clip)
        adam_update(self.actor, cfg.lr_real)

        self.soft_update_target()
        self.updates += 1
        return {"critic_loss": float(c_loss.data), "actor_loss": float(a_loss.data)}

    def soft_update_target(self, tau: float | None = None) -> None:
        self.target.copy_from(self.critic, self.config.tau if tau is None else tau)

    def stores(self) -> dict[str, ParameterStore]:
        return {"actor": self.actor, "critic": self.critic, "critic_target": self.target}


def actor_sample(agent: SacAgent, s, z, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    a, logp = agent.sample_action(s, z, rng)
    return a.data, logp.data


def critic_loss(agent: SacAgent, batch: Batch, z, rng: np.random.Generator) -> Tensor:
    return agent.critic_loss(batch, z, rng)


def actor_loss(agent: SacAgent, batch: Batch, z, rng: np.random.Generator) -> Tensor:
    return agent.actor_loss(batch, z, rng)


def soft_update_target(agent: SacAgent, tau: float) -> None:
    agent.soft_update_target(tau)
