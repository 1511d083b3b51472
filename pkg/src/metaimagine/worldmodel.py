"""Latent-conditioned world model with physics-informed transition heads.

The reward head is a plain MLP on ``(s, a, z)``.  The transition head depends
on a :class:`PhysicsTemplate`:

* ``nav2d``: fully analytic position update, nothing learned.
* ``cartpole``: a net emits bounded cart/pole accelerations; Euler integration
  turns them into the next state exactly as the simulator does.
* ``highway_v0``: one small net per vehicle emits a bounded longitudinal
  acceleration; positions and velocities are integrated analytically and the
  lateral position follows the lane-change action.
* ``none``: ablation without physics, a net predicts the next state directly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .envlib import EnvManifest, sample_initial_states, transition_terminal
from .envlib import cartpole, highway, nav2d
from .nncore import Mlp, MlpSpec, ParameterStore, Tensor, ad
from .rollout import Trajectory

CARTPOLE_NODE_BOUND = 30.0


class ImaginationError(RuntimeError):
    """An imagined rollout produced non-finite values."""


@dataclass(frozen=True)
class PhysicsTemplate:
    """Declarative description of how the transition head is assembled.

    ``partition`` maps entity name to observation dims; ``nodes`` lists the
    semantic network outputs as ``(name, entity, bound)`` with ``bound=None``
    for unbounded outputs; ``integrator`` documents the analytic update rules.
    """

    name: str
    env_id: str
    partition: tuple
    nodes: tuple
    integrator: tuple

    def validate(self, manifest: EnvManifest) -> None:
        dims = sorted(d for _, ds in self.partition for d in ds)
        if dims != list(range(manifest.obs_dim)):
            raise ValueError(f"template {self.name!r} partition does not cover obs dims exactly once")
        for node, _, bound in self.nodes:
            if bound is not None and not np.isfinite(bound):
                raise ValueError(f"node {node!r} has a non-finite bound")

    @property
    def learned(self) -> bool:
        return bool(self.nodes)

    def entity_dims(self, entity: str) -> tuple:
        return dict(self.partition)[entity]

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "PhysicsTemplate":
        d = json.loads(text)
        return cls(
            name=d["name"],
            env_id=d["env_id"],
            partition=tuple((e, tuple(ds)) for e, ds in d["partition"]),
            nodes=tuple((n, e, b) for n, e, b in d["nodes"]),
            integrator=tuple(d["integrator"]),
        )


def physics_template(manifest: EnvManifest, physics: bool = True,
                     cartpole_bound: float = CARTPOLE_NODE_BOUND) -> PhysicsTemplate:
    env_id = manifest.env_id
    if not physics:
        return PhysicsTemplate(
            name="none", env_id=env_id,
            partition=(("state", tuple(range(manifest.obs_dim))),),
            nodes=tuple((f"next_{n}", "state", None) for n in manifest.obs_names),
            integrator=("s' = net(s, a, z)",),
        )
    if env_id == "nav2d":
        return PhysicsTemplate(
            name="nav2d", env_id=env_id,
            partition=(("agent", (0, 1)),),
            nodes=(),
            integrator=("p' = clip(p + a*dt, -4, 4)",),
        )
    if env_id == "cartpole":
        return PhysicsTemplate(
            name="cartpole", env_id=env_id,
            partition=(("cart", (0, 1)), ("pole", (2, 3))),
            nodes=(("x_acc", "cart", float(cartpole_bound)), ("theta_acc", "pole", float(cartpole_bound))),
            integrator=("x' = x + x_dot*dt", "x_dot' = x_dot + x_acc*dt",
                        "theta' = theta + theta_dot*dt", "theta_dot' = theta_dot + theta_acc*dt"),
        )
    if env_id == "highway_v0":
        ents = (("ego", (0, 1, 2, 3)),) + tuple(
            (slot, tuple(range(4 + 4 * k, 8 + 4 * k))) for k, slot in enumerate(highway._SLOTS))
        return PhysicsTemplate(
            name="highway_v0", env_id=env_id,
            partition=ents,
            nodes=tuple((f"{e}_accel", e, highway.ACCEL_LIMIT) for e, _ in ents),
            integrator=("x' = lane_after(x, a)", "y' = y - v*dt", "v' = v + a_ego*dt",
                        "dx_j' = x_main - x'", "dy_j' = dy_j + dv_j*dt",
                        "dv_j' = dv_j + (a_j - a_ego)*dt"),
        )
    raise ValueError(f"no physics template for {env_id!r}")


def _cat(parts) -> Tensor:
    return ad.concat([ad.as_tensor(p) for p in parts], axis=-1)


def integrate_nodes(template: PhysicsTemplate, s: np.ndarray, a: np.ndarray, nodes) -> Tensor:
    """Analytic next state from semantic node values (raw observation units).

    ``nodes`` is a ``(B, n_nodes)`` array or tensor in template order.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if template.name == "nav2d":
        return ad.as_tensor(nav2d.nav2d_transition(s, a))
    nodes = ad.as_tensor(nodes)
    if template.name == "cartpole":
        dt = cartpole.TAU
        return _cat([
            s[:, 0:1] + dt * s[:, 1:2],
            nodes[:, 0:1] * dt + s[:, 1:2],
            s[:, 2:3] + dt * s[:, 3:4],
            nodes[:, 1:2] * dt + s[:, 3:4],
        ])
    if template.name == "highway_v0":
        dt = highway.DT
        x_new = highway.lane_after(s[:, 0], a[:, 0])[:, None]
        a_ego = nodes[:, 0:1]
        parts = [x_new, s[:, 1:2] - s[:, 2:3] * dt, a_ego * dt + s[:, 2:3], np.zeros((len(s), 1))]
        for k in range(4):
            o = 4 + 4 * k
            parts += [
                highway.MAIN_X - x_new,
                s[:, o + 1:o + 2] + s[:, o + 2:o + 3] * dt,
                (nodes[:, k + 1:k + 2] - a_ego) * dt + s[:, o + 2:o + 3],
                np.zeros((len(s), 1)),
            ]
        return _cat(parts)
    raise ValueError(f"template {template.name!r} has no integrator")


class WorldModel:
    """Reward and transition heads conditioned on a latent task vector."""

    def __init__(self, manifest: EnvManifest, template: PhysicsTemplate | None = None,
                 latent_dim: int = 4, hidden: int | None = None, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.manifest = manifest
        self.template = template if template is not None else physics_template(manifest)
        self.template.validate(manifest)
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden if hidden is not None else (128 if manifest.env_id == "highway_v0" else 64))
        self.store = ParameterStore("worldmodel")
        d, af, m, h = manifest.obs_dim, manifest.action_feature_dim, self.latent_dim, self.hidden
        self.reward_net = Mlp(self.store, "reward", MlpSpec((d + af + m, h, h, 1)), rng)
        self.node_nets: list[tuple[Mlp, tuple]] = []
        t = self.template
        if t.name == "none":
            self.direct_net = Mlp(self.store, "trans", MlpSpec((d + af + m, h, h, d)), rng)
        elif t.name == "highway_v0":
            ego = t.entity_dims("ego")
            for node, ent, bound in t.nodes:
                dims = tuple(ego) if ent == "ego" else tuple(t.entity_dims(ent)) + tuple(ego)
                spec = MlpSpec((len(dims) + af + m, h // 2, h // 2, 1), out_scale=bound)
                self.node_nets.append((Mlp(self.store, f"trans.{ent}", spec, rng, out_init_scale=0.1), dims))
        elif t.name == "cartpole":
            spec = MlpSpec((d + af + m, h, h, len(t.nodes)), out_scale=t.nodes[0][2])
            self.node_nets.append((Mlp(self.store, "trans.dyn", spec, rng, out_init_scale=0.1),
                                   tuple(range(d))))

    # -- tensor forward passes ---------------------------------------------
    def _inputs(self, s, a, z):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(len(s), -1)
        if s.shape[-1] != self.manifest.obs_dim:
            raise ValueError(f"state dim {s.shape[-1]} != {self.manifest.obs_dim}")
        if a.shape[-1] != self.manifest.action_store_dim:
            raise ValueError(f"action dim {a.shape[-1]} != {self.manifest.action_store_dim}")
        z = ad.as_tensor(z)
        if z.ndim == 1:
            z = ad.as_tensor(np.broadcast_to(z.data, (len(s), self.latent_dim))) if not z.requires_grad \
                else ad.stack([z] * len(s), axis=0)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != {self.latent_dim}")
        return s, a, z

    def nodes_t(self, s, a, z) -> Tensor:
        """Semantic node values ``(B, n_nodes)`` for learned templates."""
        s, a, z = self._inputs(s, a, z)
        sn = self.manifest.normalize(s)
        a_enc = self.manifest.encode_actions(a)
        outs = [net(_cat([sn[:, list(dims)], a_enc, z])) for net, dims in self.node_nets]
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)

    def transition_t(self, s, a, z) -> Tensor:
        """Predicted next state in raw observation units."""
        s, a, z = self._inputs(s, a, z)
        t = self.template
        if t.name == "none":
            out = self.direct_net(_cat([self.manifest.normalize(s), self.manifest.encode_actions(a), z]))
            out = out * self.manifest.obs_halfwidth() + self.manifest.obs_center()
            return out
        nodes = self.nodes_t(s, a, z) if t.learned else None
        return integrate_nodes(t, s, a, nodes)

    def reward_t(self, s, a, z) -> Tensor:
        """Predicted reward in scaled units (``r * reward_scale``), shape ``(B,)``."""
        s, a, z = self._inputs(s, a, z)
        x = _cat([self.manifest.normalize(s), self.manifest.encode_actions(a), z])
        return self.reward_net(x)[:, 0]

    # -- numpy conveniences --------------------------------------------------
    def predict_transition(self, s, a, z) -> np.ndarray:
        single = np.ndim(s) == 1
        out = self.transition_t(s, a, np.asarray(z, dtype=np.float64)).data
        return out[0] if single else out

    def predict_reward(self, s, a, z) -> np.ndarray | float:
        single = np.ndim(s) == 1
        out = self.reward_t(s, a, np.asarray(z, dtype=np.float64)).data / self.manifest.reward_scale
        return float(out[0]) if single else out


def transition_error_t(manifest: EnvManifest, pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-row squared next-state error in normalized observation units."""
    target = np.asarray(target, dtype=np.float64)
    scale = manifest.obs_halfwidth() if manifest.normalize_obs else np.ones(manifest.obs_dim)
    diff = (pred - target) / scale
    return ad.square(diff).sum(axis=-1)


def imagine_rollouts(wm: WorldModel, policy, zs: np.ndarray, s0: np.ndarray, horizon: int,
                     rng: np.random.Generator, tags=None) -> list[Trajectory]:
    """Lockstep imagined rollouts, one per row of ``zs``.

    Actions come from ``policy(s, z, rng)``; predicted states are clipped to the
    manifest ranges and a rollout stops where the real env would terminate.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    m = wm.manifest
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    s = np.atleast_2d(np.asarray(s0, dtype=np.float64)).copy()
    n = len(zs)
    tags = list(tags) if tags is not None else ["I"] * n
    if hasattr(policy, "reset"):
        policy.reset(n)
    cols = {k: [] for k in ("obs", "actions", "rewards", "next_obs", "terminals", "alive")}
    alive = np.ones(n, dtype=bool)
    for _ in range(horizon):
        acts = np.asarray(policy(s, zs, rng), dtype=np.float64)
        if acts.ndim == 1:
            acts = acts[:, None]
        nxt = m.clip_obs(wm.predict_transition(s, acts, zs))
        rew = np.atleast_1d(wm.predict_reward(s, acts, zs))
        if not (np.all(np.isfinite(nxt[alive])) and np.all(np.isfinite(rew[alive]))):
            raise ImaginationError("world model produced non-finite predictions during imagination")
        term = transition_terminal(m.env_id, s, nxt)
        for k, v in zip(("obs", "actions", "rewards", "next_obs", "terminals", "alive"),
                        (s, acts, rew, nxt, term, alive.copy())):
            cols[k].append(v)
        alive &= ~term
        s = nxt
        if not alive.any():
            break
    out = []
    steps = len(cols["obs"])
    for i in range(n):
        keep = [t for t in range(steps) if cols["alive"][t][i]]
        out.append(Trajectory(
            obs=np.array([cols["obs"][t][i] for t in keep]),
            actions=np.array([cols["actions"][t][i] for t in keep]),
            rewards=np.array([cols["rewards"][t][i] for t in keep]),
            next_obs=np.array([cols["next_obs"][t][i] for t in keep]),
            terminals=np.array([cols["terminals"][t][i] for t in keep], dtype=bool),
            tag=tags[i], z=zs[i].copy(),
        ))
    return out


def imagine_rollout(wm: WorldModel, policy, z: np.ndarray, s0: np.ndarray | None, horizon: int,
                    rng: np.random.Generator, tag: str = "I") -> Trajectory:
    """Single imagined trajectory; ``s0=None`` draws from the env's reset distribution."""
    if s0 is None:
        s0 = sample_initial_states(wm.manifest.env_id, 1, rng)[0]
    return imagine_rollouts(wm, policy, np.asarray(z)[None], np.asarray(s0)[None], horizon, rng, [tag])[0]
