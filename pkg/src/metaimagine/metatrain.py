"""Meta-training: encoder/world-model learning, imagination and policy updates.

One outer iteration:

1. collect real episodes per training task with the posterior-conditioned policy;
2. train encoder and world model on the variational objective;
3. once a disentanglement probe passes, fit the factor map and compose
   imaginary task embeddings;
4. imagine rollouts for real-task embeddings (IR) and imaginary ones (I);
5. update the policy on real plus imagined data.

The encoder/world-model phase and the policy phase never touch each other's
parameters; both are checked by parameter digests when ``check_decoupling``.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envlib import (
    TaskSpec,
    factor_schema,
    get_manifest,
    grid_shape,
    grid_task_specs,
    hull_task_specs,
    make_env,
    sample_initial_states,
    sample_task_specs,
)
from .imagination import (
    FactorMap,
    NonDisentangledError,
    compose_imaginary_contexts,
    factor_map_from_means,
    write_imaginary_manifest,
)
from .inference import LatentPosterior, kl_tensor, make_encoder
from .nncore import Tensor, ad, adam_update, backward, clip_grad_norm, load_into, read_checkpoint, save_checkpoint
from .policy import ReplayBuffer, SacAgent, SacConfig
from .rollout import ExplorationPolicy, Trajectory, collect_episodes, transition_features
from .worldmodel import PhysicsTemplate, WorldModel, imagine_rollouts, physics_template, transition_error_t


class ConfigError(ValueError):
    """Invalid or unparseable training configuration."""


class NumericError(RuntimeError):
    """A loss or prediction became non-finite."""


@dataclass
class TrainConfig:
    env_id: str = "nav2d"
    n_tasks: int = 8
    task_layout: str = "grid"  # grid | random
    factor_ranges: str = ""  # e.g. "traffic_speed=20:30;p=-1:1"
    seed: int = 0
    # representation
    latent_dim: int = 4
    encoder: str = "gru"  # gru | pog
    encoder_hidden: int = 64
    wm_hidden: int = 0  # 0 picks the per-env default
    physics: bool = True
    cartpole_node_bound: float = 30.0
    beta: float = 5.0
    alpha_T: float = 1.0
    alpha_R: float = 1.0
    alpha_c1: float = 0.1
    alpha_c2: float = 0.1
    sigma: float = 2.0
    nll_reduction: str = "sum"  # sum over each context's tuples, or per-tuple mean
    context_size: int = 64
    contexts_per_task: int = 4
    recent_window: int = 400
    lr_ed: float = 1e-3
    ed_warmup_steps: int = 200
    ed_steps: int = 20
    # data collection
    explore_episodes: int = 5
    episodes_per_iter: int = 2
    iterations: int = 50
    # policy
    policy_steps: int = 100
    gamma: float = 0.99
    tau: float = 0.005
    alpha_ent: float = 0.2
    batch_size: int = 256
    lr_real: float = 3e-4
    lr_imag: float = 3e-4
    policy_hidden: int = 0
    # imagination
    enable_ir: bool = True
    enable_i: bool = True
    n_imaginary: int = 8
    imag_rollouts: int = 1
    imag_horizon: int = 0  # 0 uses the env horizon
    interp_density: int = 4
    eps_scale: float = -1.0  # negative means 0.5 / density
    probe_threshold: float = 80.0
    probe_every: int = 5
    probe_vectors: int = 40
    probe_pairs: int = 4
    # evaluation and artifacts
    eval_every: int = 0
    eval_tasks: int = 4
    context_budget: int = 100
    checkpoint_every: int = 10
    check_decoupling: bool = True
    cartpole_reward_centered: bool = False
    highway_reward_sign: str = "negate_deviation"
    highway_rear_term: str = "accel"
    out_dir: str = "runs/default"

    # -- validation --------------------------------------------------------
    def validate(self) -> "TrainConfig":
        errs = []
        if self.env_id not in ("nav2d", "cartpole", "highway_v0"):
            errs.append(f"unknown env_id {self.env_id!r}")
        if self.task_layout not in ("grid", "random"):
            errs.append("task_layout must be grid or random")
        if self.encoder not in ("gru", "pog"):
            errs.append("encoder must be gru or pog")
        if self.nll_reduction not in ("sum", "mean"):
            errs.append("nll_reduction must be sum or mean")
        if self.beta < 0:
            errs.append("beta must be >= 0")
        if self.sigma <= 0:
            errs.append("sigma must be > 0")
        for k in ("alpha_T", "alpha_R", "alpha_c1", "alpha_c2"):
            if getattr(self, k) < 0:
                errs.append(f"{k} must be >= 0")
        for k in ("n_tasks", "latent_dim", "context_size", "contexts_per_task", "interp_density", "batch_size"):
            if getattr(self, k) < 1:
                errs.append(f"{k} must be >= 1")
        for k in ("iterations", "ed_steps", "ed_warmup_steps", "policy_steps", "explore_episodes",
                  "episodes_per_iter", "n_imaginary", "context_budget"):
            if getattr(self, k) < 0:
                errs.append(f"{k} must be >= 0")
        try:
            self.ranges()
        except (ValueError, KeyError) as exc:
            errs.append(str(exc))
        try:
            self.sac_config()
        except ValueError as exc:
            errs.append(str(exc))
        if self.env_id in ("nav2d", "cartpole", "highway_v0") and self.latent_dim < len(factor_schema(self.env_id)):
            errs.append("latent_dim must be at least the number of generative factors")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def ranges(self) -> dict | None:
        if not self.factor_ranges.strip():
            return None
        out = {}
        for item in self.factor_ranges.split(";"):
            if not item.strip():
                continue
            name, _, span = item.partition("=")
            lo, _, hi = span.partition(":")
            out[name.strip()] = (float(lo), float(hi))
        factor_schema(self.env_id, out)
        return out

    def sac_config(self) -> SacConfig:
        return SacConfig(gamma=self.gamma, tau=self.tau, alpha_ent=self.alpha_ent, batch_size=self.batch_size,
                         lr_real=self.lr_real, lr_imag=self.lr_imag, hidden=self.policy_hidden or None)

    def env_kwargs(self) -> dict:
        return {"cartpole_reward_centered": self.cartpole_reward_centered,
                "highway_reward_sign": self.highway_reward_sign,
                "highway_rear_term": self.highway_rear_term}

    @property
    def data_sources(self) -> str:
        label = f"R{self.n_tasks}"
        if self.enable_i and self.n_imaginary > 0:
            label += f"I{self.n_imaginary}"
        return label

    # -- serialization -----------------------------------------------------
    def to_text(self, include_out_dir: bool = True) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "out_dir" and not include_out_dir:
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text(include_out_dir=False).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return (base or cls()).with_overrides(values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        return cls.from_text(text)

    def with_overrides(self, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(self)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, types[key], raw)
        return self.replace(**kw)


def _coerce(key: str, type_name, raw):
    if not isinstance(raw, str):
        return raw
    t = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if t == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


# -- losses --------------------------------------------------------------------
def nll_loss(wm: WorldModel, obs, actions, rewards, next_obs, z, alpha_T: float = 1.0,
             alpha_R: float = 1.0) -> Tensor:
    """``alpha_T |s' - s'_hat|^2 + alpha_R (r - r_hat)^2`` averaged over tuples.

    States are compared in normalized units and rewards in scaled units.
    """
    if len(obs) == 0:
        raise ValueError("reconstruction loss on an empty batch")
    m = wm.manifest
    loss = None
    if alpha_T > 0:
        loss = transition_error_t(m, wm.transition_t(obs, actions, z), next_obs).mean() * alpha_T
    if alpha_R > 0:
        target = np.asarray(rewards, dtype=np.float64) * m.reward_scale
        r_term = ad.square(wm.reward_t(obs, actions, z) - target).mean() * alpha_R
        loss = r_term if loss is None else loss + r_term
    return loss if loss is not None else ad.as_tensor(0.0)


def cluster_losses(means_by_task, sigma: float) -> tuple[Tensor, Tensor]:
    """Intra-task spread and clipped inter-task proximity of posterior means.

    ``L_intra = sum_i mean_k |z_ik - zbar_i|`` and
    ``L_inter = sum_{i<j} clip(sigma - |zbar_i - zbar_j|, 0, sigma)``.
    """
    if not means_by_task:
        raise ValueError("cluster losses need at least one task")
    cents = []
    intra = ad.as_tensor(0.0)
    for m in means_by_task:
        m = ad.as_tensor(m)
        c = m.mean(axis=0)
        cents.append(c)
        intra = intra + ad.norm(m - c, axis=-1).mean()
    inter = ad.as_tensor(0.0)
    n = len(cents)
    if n > 1:
        c = ad.stack(cents, axis=0)
        ii, jj = np.triu_indices(n, k=1)
        d = ad.norm(c[ii] - c[jj], axis=-1)
        inter = ad.clip(sigma - d, 0.0, sigma).sum()
    return intra, inter


@dataclass
class ContextBatch:
    """``B`` contexts of up to ``T`` tuples with the owning task index of each."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    mask: np.ndarray
    task_index: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    def features(self, manifest) -> np.ndarray:
        return transition_features(manifest, self.obs, self.actions, self.rewards, self.next_obs)

    def trajectories(self) -> list[Trajectory]:
        out = []
        for i in range(len(self)):
            n = int(self.mask[i].sum())
            out.append(Trajectory(self.obs[i, :n], self.actions[i, :n], self.rewards[i, :n], self.next_obs[i, :n],
                                  np.zeros(n, dtype=bool), int(self.task_index[i])))
        return out


def sample_contexts(buffer: ReplayBuffer, tasks: list, per_task: int, size: int, rng: np.random.Generator,
                    recent_only: bool = True, source="R") -> ContextBatch:
    rows = []
    for ti, task in enumerate(tasks):
        avail = buffer.count(task, source, recent_only)
        n = min(size, avail)
        for _ in range(per_task):
            b = buffer.sample(n, rng, task=task, source=source, recent_only=recent_only, ordered=True)
            rows.append((ti, b))
    t_len = max(len(b) for _, b in rows)
    bsz = len(rows)

    def pad(arr, width):
        out = np.zeros((bsz, t_len, width) if width else (bsz, t_len))
        for i, (_, b) in enumerate(rows):
            out[i, :len(b)] = getattr(b, arr)
        return out

    mask = np.zeros((bsz, t_len))
    for i, (_, b) in enumerate(rows):
        mask[i, :len(b)] = 1.0
    return ContextBatch(pad("obs", buffer.obs_dim), pad("actions", buffer.action_dim), pad("rewards", 0),
                        pad("next_obs", buffer.obs_dim), mask, np.array([ti for ti, _ in rows]))


def elbo_objective(wm: WorldModel, encoder, batch: ContextBatch, config: TrainConfig,
                   eps: np.ndarray) -> tuple[Tensor, dict]:
    """``L_NLL + beta * L_KL + alpha_c1 * L_intra + alpha_c2 * L_inter``.

    Each context's tuples are decoded under a reparameterized sample of that
    context's posterior; ``eps`` holds the ``(B, M)`` standard-normal draws.
    """
    m = wm.manifest
    feats = batch.features(m)
    mean, std = encoder.posterior_tensors(feats, batch.mask)
    z = mean + std * eps
    valid = batch.mask.reshape(-1) > 0
    t_len = batch.mask.shape[1]
    rows = np.repeat(np.arange(len(batch)), t_len)[valid]
    flat = lambda a: a.reshape((-1,) + a.shape[2:])[valid]  # noqa: E731
    nll = nll_loss(wm, flat(batch.obs), flat(batch.actions), flat(batch.rewards), flat(batch.next_obs),
                   z[rows], config.alpha_T, config.alpha_R)
    if config.nll_reduction == "sum":
        nll = nll * (valid.sum() / len(batch))
    kl = kl_tensor(mean, std).mean()
    groups = [mean[np.nonzero(batch.task_index == t)[0]] for t in np.unique(batch.task_index)]
    intra, inter = cluster_losses(groups, config.sigma)
    total = nll + config.beta * kl + config.alpha_c1 * intra + config.alpha_c2 * inter
    terms = {"elbo": float(total.data), "nll": float(nll.data), "kl": float(kl.data),
             "intra": float(intra.data), "inter": float(inter.data)}
    return total, terms


# -- runtime state ----------------------------------------------------------------
@dataclass
class RunArtifacts:
    out_dir: Path
    checkpoint: Path
    metrics_csv: Path
    imaginary_manifest: Path
    config_path: Path
    config_hash: str
    config: TrainConfig
    encoder: object = None
    worldmodel: WorldModel | None = None
    agent: SacAgent | None = None
    tasks: list = field(default_factory=list)
    factor_map: FactorMap | None = None
    real_posterior_means: np.ndarray | None = None

    def profile_latents(self) -> tuple[np.ndarray, list[str]]:
        """Latents for acceleration-profile plots: a sweep along the first factor's dim."""
        m = self.config.latent_dim
        if self.factor_map is not None:
            k = len(self.factor_map.factor_names) - 1  # p for highway, goal_y / force for others
            d = self.factor_map.dims[k]
            anchors = self.factor_map.anchors[k]
            vals = np.linspace(anchors[0], anchors[-1], 5)
            base = np.zeros(m)
            zs = np.repeat(base[None], len(vals), axis=0)
            zs[:, d] = vals
            return zs, [f"z{d}={v:+.2f}" for v in vals]
        if self.real_posterior_means is not None and len(self.real_posterior_means):
            zs = self.real_posterior_means[:5]
            return zs, [f"task {i}" for i in range(len(zs))]
        return np.zeros((1, m)), ["prior"]

    def stores(self) -> dict:
        out = {"encoder": self.encoder.store, "worldmodel": self.worldmodel.store}
        if self.agent is not None:
            out.update(self.agent.stores())
        return out


def make_train_tasks(config: TrainConfig, rng: np.random.Generator) -> list[TaskSpec]:
    ranges = config.ranges()
    if config.task_layout == "grid":
        k = len(factor_schema(config.env_id, ranges))
        return grid_task_specs(config.env_id, grid_shape(config.n_tasks, k), ranges=ranges)
    return sample_task_specs(config.env_id, config.n_tasks, rng, ranges)


def make_test_tasks(train: list[TaskSpec], n: int, seed: int = 12345) -> list[TaskSpec]:
    """Held-out tasks inside the bounding box of the training factors."""
    return hull_task_specs(train, n, seed)


def build_components(config: TrainConfig, rng: np.random.Generator):
    manifest = get_manifest(config.env_id, config.ranges())
    encoder = make_encoder(config.encoder, manifest, config.latent_dim, config.encoder_hidden, rng)
    template = physics_template(manifest, config.physics, config.cartpole_node_bound)
    wm = WorldModel(manifest, template, config.latent_dim, config.wm_hidden or None, rng)
    agent = SacAgent(manifest, config.latent_dim, config.sac_config(), rng)
    return manifest, encoder, wm, agent


class _Trainer:
    def __init__(self, config: TrainConfig, with_policy: bool = True):
        self.config = config.validate()
        self.rng = np.random.default_rng(config.seed)
        self.manifest, self.encoder, self.wm, self.agent = build_components(config, self.rng)
        self.with_policy = with_policy
        self.tasks = make_train_tasks(config, self.rng)
        self.task_keys = list(range(len(self.tasks)))
        kw = config.env_kwargs()
        self.envs = [make_env(t, config.seed * 1000 + i, **kw) for i, t in enumerate(self.tasks)]
        self.real = ReplayBuffer.for_manifest(self.manifest, config.latent_dim, recent=config.recent_window)
        self.imag = ReplayBuffer.for_manifest(self.manifest, config.latent_dim)
        self.fmap: FactorMap | None = None
        self.out = Path(config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config.config_hash()
        self.metrics_csv = self.out / "metrics.csv"
        self.manifest_csv = self.out / "imaginary_tasks.csv"
        self.config_path = self.out / "config.txt"
        self.checkpoint = self.out / "checkpoint.npz"
        self.config_path.write_text(f"# config_hash = {self.hash}\n" + config.to_text())
        for p in (self.metrics_csv, self.manifest_csv):
            if p.exists():
                p.unlink()
        write_imaginary_manifest(self.manifest_csv, [], config_hash=self.hash, latent_dim=config.latent_dim)
        self.test_tasks = make_test_tasks(self.tasks, config.eval_tasks) if config.eval_tasks else []
        self.start = time.perf_counter()
        self.ed_adam_steps = 0

    # -- data ------------------------------------------------------------
    def explore(self, episodes: int) -> list[float]:
        policy = ExplorationPolicy(self.manifest)
        returns = []
        for _ in range(episodes):
            trajs = collect_episodes(self.envs, policy, None, self.rng, task_ids=self.task_keys)
            for tr in trajs:
                self.real.add_trajectory(tr)
                returns.append(tr.episode_return)
        return returns

    def task_posteriors(self, recent_only: bool = True) -> LatentPosterior:
        cfg = self.config
        batch = sample_contexts(self.real, self.task_keys, 1, cfg.context_size, self.rng, recent_only)
        mean, std = self.encoder.posterior_tensors(batch.features(self.manifest), batch.mask)
        return LatentPosterior(mean.data, std.data)

    def collect_policy_episodes(self) -> list[float]:
        returns = []
        for _ in range(self.config.episodes_per_iter):
            post = self.task_posteriors()
            z = post.mean + post.std * self.rng.standard_normal(post.mean.shape)
            for tr in collect_episodes(self.envs, self.agent, z, self.rng, task_ids=self.task_keys):
                self.real.add_trajectory(tr)
                returns.append(tr.episode_return)
        return returns

    # -- encoder / world model --------------------------------------------
    def ed_step(self, recent_only: bool = True) -> dict:
        cfg = self.config
        batch = sample_contexts(self.real, self.task_keys, cfg.contexts_per_task, cfg.context_size, self.rng,
                                recent_only)
        eps = self.rng.standard_normal((len(batch), cfg.latent_dim))
        self.encoder.store.zero_grad()
        self.wm.store.zero_grad()
        loss, terms = elbo_objective(self.wm, self.encoder, batch, cfg, eps)
        if not np.isfinite(loss.data):
            self.dump_failure("elbo", terms)
        backward(loss)
        clip_grad_norm([self.encoder.store, self.wm.store], 100.0)
        adam_update(self.encoder.store, cfg.lr_ed)
        if self.wm.store.has_grad():
            adam_update(self.wm.store, cfg.lr_ed)
        self.ed_adam_steps += 1
        return terms

    def train_ed(self, steps: int, recent_only: bool = True) -> dict:
        acc: dict = {}
        for _ in range(steps):
            for k, v in self.ed_step(recent_only).items():
                acc.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    # -- imagination -------------------------------------------------------
    def probe(self) -> float:
        from .evalkit import disentanglement_score

        cfg = self.config
        return disentanglement_score(self.encoder, cfg.env_id, L=cfg.probe_pairs, trials=cfg.probe_vectors,
                                     rng=self.rng, ranges=cfg.ranges(), env_kwargs=cfg.env_kwargs())

    def real_task_means(self) -> np.ndarray:
        cfg = self.config
        batch = sample_contexts(self.real, self.task_keys, cfg.contexts_per_task, cfg.context_size, self.rng)
        mean, _ = self.encoder.posterior_tensors(batch.features(self.manifest), batch.mask)
        return np.stack([mean.data[batch.task_index == t].mean(axis=0) for t in range(len(self.tasks))])

    def fit_map(self, task_means: np.ndarray) -> FactorMap | None:
        cfg = self.config
        eps = None if cfg.eps_scale < 0 else cfg.eps_scale
        try:
            return factor_map_from_means(self.tasks[0].factor_names, np.stack([t.vector() for t in self.tasks]),
                                         task_means, cfg.interp_density, eps)
        except (NonDisentangledError, ValueError):
            return None

    def imagine(self, iteration: int, task_means: np.ndarray) -> dict:
        cfg = self.config
        self.imag.clear()
        horizon = cfg.imag_horizon or self.manifest.horizon
        zs, tags, keys = [], [], []
        if cfg.enable_ir:
            for i, zm in enumerate(task_means):
                for _ in range(cfg.imag_rollouts):
                    zs.append(zm)
                    tags.append("IR")
                    keys.append(("IR", i))
        items = []
        if cfg.enable_i and self.fmap is not None and cfg.n_imaginary > 0:
            items = compose_imaginary_contexts(self.fmap, self.rng, cfg.n_imaginary, task_means)
            write_imaginary_manifest(self.manifest_csv, items, iteration, self.hash, cfg.latent_dim)
            for j, (z, _) in enumerate(items):
                for _ in range(cfg.imag_rollouts):
                    zs.append(z)
                    tags.append("I")
                    keys.append(("I", j))
        if not zs:
            return {"n_imaginary": 0, "imag_tuples": 0}
        s0 = sample_initial_states(self.manifest.env_id, len(zs), self.rng)
        trajs = imagine_rollouts(self.wm, self.agent, np.array(zs), s0, horizon, self.rng, tags)
        for tr, key in zip(trajs, keys):
            self.imag.add_trajectory(tr, key)
        return {"n_imaginary": len(items), "imag_tuples": self.imag.count()}

    # -- policy ------------------------------------------------------------
    def train_policy(self, steps: int) -> dict:
        cfg = self.config
        post = self.task_posteriors()
        z_task = post.mean + post.std * self.rng.standard_normal(post.mean.shape)
        stats: dict = {}
        n_real = self.real.count(source="R")
        n_imag = self.imag.count()
        for _ in range(steps):
            rb = self.real.sample(min(cfg.batch_size, n_real), self.rng, source="R")
            real = (rb, z_task[rb.tasks.astype(int)])
            imag = None
            if n_imag > 0:
                ib = self.imag.sample(min(cfg.batch_size, n_imag), self.rng)
                imag = (ib, ib.z)
            out = self.agent.update(real, self.rng, imag)
            for k, v in out.items():
                if not np.isfinite(v):
                    self.dump_failure(k, out)
                stats.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in stats.items()}

    # -- bookkeeping -------------------------------------------------------
    def dump_failure(self, what: str, terms: dict) -> None:
        path = self.out / "numeric_failure.json"
        path.write_text(json.dumps({"loss": what, "terms": terms, "config_hash": self.hash,
                                    "ed_steps": self.ed_adam_steps}, indent=2, default=str))
        raise NumericError(f"non-finite {what}; diagnostics written to {path}")

    def log(self, row: dict) -> None:
        new = not self.metrics_csv.exists()
        with self.metrics_csv.open("a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
            if new:
                w.writeheader()
            w.writerow({k: _fmt(row.get(k, "")) for k in METRIC_COLUMNS})

    def save(self, iteration: int, task_means: np.ndarray | None) -> None:
        stores = {"encoder": self.encoder.store, "worldmodel": self.wm.store}
        if self.with_policy:
            stores.update(self.agent.stores())
        meta = {
            "iteration": iteration,
            "config": self.config.to_text(),
            "template": self.wm.template.to_json(),
            "tasks": [t.factors for t in self.tasks],
            "real_posterior_means": None if task_means is None else task_means.tolist(),
            "factor_map": None if self.fmap is None else {
                "names": list(self.fmap.factor_names), "dims": list(self.fmap.dims),
                "anchors": [a.tolist() for a in self.fmap.anchors],
                "density": list(self.fmap.density), "eps_scale": list(self.fmap.eps_scale)},
        }
        save_checkpoint(self.checkpoint, stores, self.hash, meta)

    def artifacts(self, task_means) -> RunArtifacts:
        return RunArtifacts(self.out, self.checkpoint, self.metrics_csv, self.manifest_csv, self.config_path,
                            self.hash, self.config, self.encoder, self.wm, self.agent if self.with_policy else None,
                            self.tasks, self.fmap, task_means)

    def elapsed(self) -> float:
        return time.perf_counter() - self.start


METRIC_COLUMNS = ["iteration", "wall_clock", "elbo", "nll", "kl", "intra", "inter", "critic_loss", "actor_loss",
                  "disentanglement", "train_return", "eval_return", "n_imaginary", "imag_tuples", "config_hash"]


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return v


def _digest(stores) -> str:
    h = hashlib.sha256()
    for s in stores:
        h.update(s.digest().encode())
    return h.hexdigest()


def meta_train(config: TrainConfig, progress=None) -> RunArtifacts:
    """Run the full meta-training loop and write artifacts into ``config.out_dir``."""
    tr = _Trainer(config)
    cfg = tr.config
    tr.explore(cfg.explore_episodes)
    warm = tr.train_ed(cfg.ed_warmup_steps) if cfg.ed_warmup_steps else {}
    probe_passed = False
    last_probe = float("nan")
    task_means = None
    for it in range(cfg.iterations):
        row: dict = {"iteration": it, "config_hash": tr.hash}
        returns = tr.collect_policy_episodes()
        row["train_return"] = float(np.mean(returns)) if returns else float("nan")

        policy_digest = _digest([tr.agent.actor, tr.agent.critic, tr.agent.target])
        row.update(tr.train_ed(cfg.ed_steps) if cfg.ed_steps else warm)
        if cfg.check_decoupling and _digest([tr.agent.actor, tr.agent.critic, tr.agent.target]) != policy_digest:
            raise RuntimeError("encoder/world-model phase modified policy parameters")

        task_means = tr.real_task_means()
        if cfg.enable_i and not probe_passed and cfg.probe_every > 0 and it % cfg.probe_every == 0:
            last_probe = tr.probe()
            probe_passed = last_probe >= cfg.probe_threshold
        row["disentanglement"] = last_probe
        tr.fmap = tr.fit_map(task_means) if probe_passed else None
        row.update(tr.imagine(it, task_means))

        ed_digest = _digest([tr.encoder.store, tr.wm.store])
        if cfg.policy_steps:
            row.update(tr.train_policy(cfg.policy_steps))
        if cfg.check_decoupling and _digest([tr.encoder.store, tr.wm.store]) != ed_digest:
            raise RuntimeError("policy phase modified encoder/world-model parameters")

        if cfg.eval_every and tr.test_tasks and (it + 1) % cfg.eval_every == 0:
            res = adapt_components(tr.encoder, tr.agent, tr.test_tasks, cfg.context_budget, [cfg.seed],
                                   cfg.env_kwargs())
            row["eval_return"] = res.mean
        row["wall_clock"] = tr.elapsed()
        tr.log(row)
        if progress is not None:
            progress(row)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            tr.save(it, task_means)
    if task_means is None:
        task_means = tr.real_task_means()
    tr.save(cfg.iterations, task_means)
    return tr.artifacts(task_means)


def train_worldmodel(config: TrainConfig, progress=None) -> RunArtifacts:
    """Encoder and world model only, on exploration data (no policy, no imagination).

    Every iteration adds ``episodes_per_iter`` fresh exploration episodes per
    task and trains on the recent window, so contexts cannot be memorized.
    Runs ``ed_warmup_steps + iterations * ed_steps`` gradient steps and logs
    the loss terms once per iteration.
    """
    tr = _Trainer(config, with_policy=False)
    cfg = tr.config
    tr.explore(cfg.explore_episodes)
    if cfg.ed_warmup_steps:
        tr.train_ed(cfg.ed_warmup_steps)
    for it in range(cfg.iterations):
        row = {"iteration": it, "config_hash": tr.hash}
        row["train_return"] = float(np.mean(tr.explore(cfg.episodes_per_iter) or [np.nan]))
        row.update(tr.train_ed(cfg.ed_steps))
        row["wall_clock"] = tr.elapsed()
        tr.log(row)
        if progress is not None:
            progress(row)
    task_means = tr.real_task_means() if tr.real.count() else None
    tr.save(cfg.iterations, task_means)
    return tr.artifacts(task_means)


# -- meta-test -------------------------------------------------------------------
@dataclass
class AdaptResult:
    returns: np.ndarray  # (n_seeds, n_tasks)
    prior_returns: np.ndarray

    @property
    def per_seed(self) -> np.ndarray:
        return self.returns.mean(axis=1)

    @property
    def mean(self) -> float:
        return float(self.per_seed.mean())

    @property
    def var(self) -> float:
        return float(self.per_seed.var())


def collect_context(envs, agent: SacAgent, z: np.ndarray, budget: int, rng) -> list[list[Trajectory]]:
    """Up to ``budget`` steps per env (across episodes) under latent ``z``."""
    ctx = [[] for _ in envs]
    remaining = budget
    while remaining > 0:
        trajs = collect_episodes(envs, agent, z, rng, max_steps=remaining)
        for i, t in enumerate(trajs):
            ctx[i].append(t)
        remaining -= max(len(t) for t in trajs)
    return ctx


def _concat(trajs: list[Trajectory]) -> list:
    tuples = []
    for t in trajs:
        tuples += t.tuples()
    return tuples


def adapt_components(encoder, agent: SacAgent, test_specs: list[TaskSpec], context_budget: int,
                     seeds=(0, 1, 2), env_kwargs: dict | None = None) -> AdaptResult:
    """Prior-conditioned exploration, posterior inference, then a deterministic evaluation episode."""
    m = agent.latent_dim
    returns, prior_returns = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        envs = [make_env(s, 10_000 + 97 * seed + i, **(env_kwargs or {})) for i, s in enumerate(test_specs)]
        z_prior = np.zeros((len(envs), m))
        if context_budget > 0:
            z_explore = rng.standard_normal((len(envs), m))
            ctx = collect_context(envs, agent, z_explore, context_budget, rng)
            z_post = np.stack([encoder.encode(_concat(c)[:context_budget])[-1].mean for c in ctx])
        else:
            z_post = z_prior
        det = _Deterministic(agent)
        post_eps = collect_episodes(envs, det, z_post, rng)
        prior_eps = collect_episodes(envs, det, z_prior, rng)
        returns.append([t.episode_return for t in post_eps])
        prior_returns.append([t.episode_return for t in prior_eps])
    return AdaptResult(np.array(returns), np.array(prior_returns))


class _Deterministic:
    def __init__(self, agent: SacAgent):
        self.agent = agent
        self.latent_dim = agent.latent_dim

    def __call__(self, obs, z, rng):
        return self.agent.act(obs, z, rng, deterministic=True)


def meta_test_adapt(artifacts: RunArtifacts, test_specs: list[TaskSpec], context_budget: int,
                    seeds=(0, 1, 2)) -> AdaptResult:
    if artifacts.agent is None:
        raise ValueError("run has no trained policy")
    return adapt_components(artifacts.encoder, artifacts.agent, test_specs, context_budget, seeds,
                            artifacts.config.env_kwargs())


# -- loading ---------------------------------------------------------------------------
def load_run(run_dir) -> RunArtifacts:
    """Rebuild a run's components from its config snapshot and checkpoint."""
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoint.npz"
    cfg_path = run_dir / "config.txt"
    for p in (ckpt, cfg_path):
        if not p.exists():
            raise FileNotFoundError(f"missing run artifact {p}")
    config = TrainConfig.from_file(cfg_path).replace(out_dir=str(run_dir))
    header, _ = read_checkpoint(ckpt)
    rng = np.random.default_rng(0)
    manifest, encoder, _, agent = build_components(config, rng)
    template = PhysicsTemplate.from_json(header["meta"]["template"])
    wm = WorldModel(manifest, template, config.latent_dim, config.wm_hidden or None, rng)
    stores = {"encoder": encoder.store, "worldmodel": wm.store}
    has_policy = "actor" in header["stores"]
    if has_policy:
        stores.update(agent.stores())
    load_into(ckpt, stores)
    meta = header["meta"]
    fmap = None
    if meta.get("factor_map"):
        f = meta["factor_map"]
        fmap = FactorMap(tuple(f["names"]), tuple(f["dims"]), tuple(np.array(a) for a in f["anchors"]),
                         config.latent_dim, tuple(f["density"]), tuple(f["eps_scale"]))
    means = meta.get("real_posterior_means")
    tasks = [TaskSpec(config.env_id, f, config.ranges()) for f in meta.get("tasks", [])]
    return RunArtifacts(run_dir, ckpt, run_dir / "metrics.csv", run_dir / "imaginary_tasks.csv", cfg_path,
                        header["config_hash"], config, encoder, wm, agent if has_policy else None, tasks, fmap,
                        None if means is None else np.array(means))


# -- evaluation ------------------------------------------------------------------------
def evaluate_run(run: RunArtifacts, seed: int = 0, probe_pairs: int = 5, probe_vectors: int = 100,
                 episodes_per_task: int = 5, heldout_tasks: int = 8, window: int | None = None,
                 sections=("disentanglement", "intra", "recon", "sfi", "sci")):
    """Representation and imagination metrics for a trained encoder and world model.

    Intra-cluster variance uses fresh exploration episodes of the training
    tasks; reconstruction, SFI and SCI use held-out tasks inside their hull.
    """
    from .evalkit import (MetricReport, NoSpeculatorError, Stat, disentanglement_score, get_speculator,
                          intra_cluster_variance, reconstruction_error, sci_error, sfi_error)
    from .evalkit.metrics import collect_probe_trajectories
    from .imagination import factor_dim_scores

    cfg = run.config
    rng = np.random.default_rng(seed)
    kw = cfg.env_kwargs()
    report = MetricReport()
    if "disentanglement" in sections:
        score = disentanglement_score(run.encoder, cfg.env_id, probe_pairs, probe_vectors, rng,
                                      window=window, ranges=cfg.ranges(), env_kwargs=kw)
        report.disentanglement_score = Stat(score, 0.0, 1)
    tasks = run.tasks or make_train_tasks(cfg, rng)
    if "intra" in sections:
        specs = [t for t in tasks for _ in range(episodes_per_task)]
        trajs = collect_probe_trajectories(specs, rng, env_kwargs=kw)
        by_task = [trajs[i * episodes_per_task:(i + 1) * episodes_per_task] for i in range(len(tasks))]
        report.intra_cluster_variance = intra_cluster_variance(run.encoder, by_task, window)
    held = make_test_tasks(tasks, heldout_tasks, seed=10_000 + seed)
    held_trajs = collect_probe_trajectories(held, rng, env_kwargs=kw) if held else []
    if "recon" in sections and held_trajs:
        report.reconstruction_error = reconstruction_error(run.worldmodel, run.encoder, held_trajs, window)
    if "sfi" in sections and held_trajs:
        try:
            report.sfi_error = sfi_error(get_speculator(cfg.env_id), run.worldmodel, run.encoder, held_trajs, rng,
                                         window=window, ranges=cfg.ranges())
        except NoSpeculatorError:
            pass
    if "sci" in sections and held_trajs:
        zs = run.encoder.posterior_means(held_trajs, window)
        if run.factor_map is not None:
            dims = list(run.factor_map.dims)
        else:
            scores = factor_dim_scores(np.stack([t.vector() for t in held]), zs)
            dims = sorted({int(np.argmax(s)) for s in scores})
        report.sci_error = sci_error(run.encoder, run.worldmodel, None, zs, rng, dims, window=window)
    return report
