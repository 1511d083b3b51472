"""Representation and imagination quality metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..envlib import TaskSpec, factor_schema, get_manifest, make_env, sample_initial_states, sample_task_specs
from ..rollout import ExplorationPolicy, Trajectory, collect_episodes
from ..worldmodel import imagine_rollouts, transition_error_t
from .speculators import get_speculator


@dataclass
class Stat:
    mean: float
    var: float
    n: int = 0

    @classmethod
    def of(cls, values) -> "Stat":
        v = np.asarray(values, dtype=np.float64).ravel()
        v = v[np.isfinite(v)]
        if v.size == 0:
            return cls(float("nan"), float("nan"), 0)
        return cls(float(v.mean()), float(v.var()), int(v.size))

    @property
    def std(self) -> float:
        return float(np.sqrt(self.var))

    def __str__(self) -> str:
        return f"{self.mean:.3f}±{self.var:.3f}"


@dataclass
class MetricReport:
    disentanglement_score: Stat | None = None  # mean ± std, percent
    intra_cluster_variance: Stat | None = None
    reconstruction_error: Stat | None = None
    sfi_error: dict = field(default_factory=dict)
    sci_error: Stat | None = None

    def rows(self) -> list[tuple]:
        out = []
        for name in ("disentanglement_score", "intra_cluster_variance", "reconstruction_error", "sci_error"):
            s = getattr(self, name)
            if s is not None:
                spread = s.std if name == "disentanglement_score" else s.var
                out.append((name, "", s.mean, spread, s.n))
        for factor, s in self.sfi_error.items():
            out.append(("sfi_error", factor, s.mean, s.var, s.n))
        return out

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "factor", "mean", "spread", "n"])
            for row in self.rows():
                w.writerow(row)
        return path

    def summary(self) -> str:
        lines = ["metric                       value"]
        for name, factor, mean, spread, _ in self.rows():
            label = f"{name}[{factor}]" if factor else name
            lines.append(f"{label:<28} {mean:.3f} ± {spread:.3f}")
        return "\n".join(lines)


# -- linear probe -----------------------------------------------------------
def fit_logistic_regression(x: np.ndarray, y: np.ndarray, n_classes: int, steps: int = 500,
                            lr: float = 0.5, l2: float = 1e-4):
    """Multinomial logistic regression by full-batch gradient descent on standardized inputs."""
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xs = (x - mu) / sd
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    n = len(x)
    for _ in range(steps):
        logits = xs @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (xs.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    return w, b, mu, sd


def predict_logistic_regression(model, x: np.ndarray) -> np.ndarray:
    w, b, mu, sd = model
    return np.argmax(((x - mu) / sd) @ w + b, axis=1)


def linear_probe_accuracy(x: np.ndarray, y: np.ndarray, n_classes: int, rng: np.random.Generator,
                          train_frac: float = 0.8) -> float:
    """Held-out accuracy with a stratified split.

    Stratifying keeps class proportions equal across the split; a plain random
    split pushes an uninformative classifier below chance, since the class it
    over-samples for training is the one left short in the test set.
    """
    tr, te = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.nonzero(y == c)[0])
        cut = int(round(train_frac * len(idx)))
        tr.append(idx[:cut])
        te.append(idx[cut:])
    tr, te = np.concatenate(tr), np.concatenate(te)
    model = fit_logistic_regression(x[tr], y[tr], n_classes)
    return float(np.mean(predict_logistic_regression(model, x[te]) == y[te]))


# -- disentanglement --------------------------------------------------------
def _encode_chunked(encoder, trajs: list[Trajectory], window: int | None, chunk: int = 512) -> np.ndarray:
    out = [encoder.posterior_means(trajs[i:i + chunk], window) for i in range(0, len(trajs), chunk)]
    return np.concatenate(out, axis=0)


def factor_pair_specs(env_id: str, factor: int, n: int, rng: np.random.Generator,
                      ranges: dict | None = None) -> list[tuple[TaskSpec, TaskSpec]]:
    """Task pairs that agree on every factor except ``factor``."""
    schema = factor_schema(env_id, ranges)
    names = list(schema)
    lo, hi = schema[names[factor]]
    if not hi > lo:
        raise ValueError(f"factor {names[factor]!r} has no variation to probe")
    base = sample_task_specs(env_id, n, rng, ranges)
    return [(b, b.with_factor(names[factor], float(rng.uniform(lo, hi)))) for b in base]


def collect_probe_trajectories(specs: list[TaskSpec], rng: np.random.Generator, policy=None,
                               max_steps: int | None = None, env_kwargs: dict | None = None) -> list[Trajectory]:
    if not specs:
        return []
    manifest = get_manifest(specs[0].env_id)
    policy = policy if policy is not None else ExplorationPolicy(manifest)
    seeds = rng.integers(0, 2**31 - 1, size=len(specs))
    envs = [make_env(s, int(sd), **(env_kwargs or {})) for s, sd in zip(specs, seeds)]
    z = np.zeros((len(envs), getattr(policy, "latent_dim", 4)))
    out = []
    for i in range(0, len(envs), 500):
        out += collect_episodes(envs[i:i + 500], policy, z[i:i + 500], rng, max_steps=max_steps)
    return out


def disentanglement_vectors(encoder, env_id: str, L: int, per_factor: int, rng: np.random.Generator,
                            policy=None, window: int | None = None, ranges: dict | None = None,
                            max_steps: int | None = None, env_kwargs: dict | None = None):
    """``(K * per_factor, M)`` averaged ``|z1 - z2|`` vectors and their factor labels."""
    if L < 1 or per_factor < 1:
        raise ValueError("L and the number of vectors per factor must be >= 1")
    k = len(factor_schema(env_id, ranges))
    labels = np.repeat(np.arange(k), per_factor)
    pairs = []
    for f in labels:
        pairs += factor_pair_specs(env_id, int(f), L, rng, ranges)
    specs = [s for pair in pairs for s in pair]
    trajs = collect_probe_trajectories(specs, rng, policy, max_steps, env_kwargs)
    z = _encode_chunked(encoder, trajs, window)
    diff = np.abs(z[0::2] - z[1::2]).reshape(len(labels), L, -1).mean(axis=1)
    return diff, labels


def disentanglement_score(encoder, env_id: str, L: int = 5, trials: int = 200,
                          rng: np.random.Generator | int = 0, policy=None, window: int | None = None,
                          ranges: dict | None = None, max_steps: int | None = None,
                          env_kwargs: dict | None = None) -> float:
    """Held-out accuracy (percent) of a linear classifier naming which factor changed.

    ``trials`` vectors are built per factor, each the mean of ``L`` absolute
    latent differences between tasks that differ only in that factor.
    """
    rng = np.random.default_rng(rng)
    x, y = disentanglement_vectors(encoder, env_id, L, trials, rng, policy, window, ranges, max_steps, env_kwargs)
    return 100.0 * linear_probe_accuracy(x, y, int(y.max()) + 1, rng)


# -- cluster / reconstruction --------------------------------------------------
def intra_cluster_distances(means_by_task: list[np.ndarray]) -> np.ndarray:
    """Per task, the average distance of its posterior means to their centroid."""
    out = []
    for m in means_by_task:
        m = np.asarray(m, dtype=np.float64)
        out.append(float(np.mean(np.linalg.norm(m - m.mean(axis=0), axis=1))))
    return np.array(out)


def intra_cluster_variance(encoder, trajs_by_task: list[list[Trajectory]], window: int | None = None) -> Stat:
    for trs in trajs_by_task:
        if len(trs) < 2:
            raise ValueError("need at least two trajectories per task")
    means = [encoder.posterior_means(list(trs), window) for trs in trajs_by_task]
    return Stat.of(intra_cluster_distances(means))


def tuple_reconstruction_errors(wm, obs, actions, rewards, next_obs, z) -> np.ndarray:
    """Per-tuple squared next-state error (normalized units) plus squared scaled reward error."""
    m = wm.manifest
    trans = transition_error_t(m, wm.transition_t(obs, actions, z), next_obs).data
    rew = (wm.reward_t(obs, actions, z).data - np.asarray(rewards) * m.reward_scale) ** 2
    return trans + rew


def reconstruction_error(wm, encoder, trajs: list[Trajectory], window: int | None = None) -> Stat:
    """Each trajectory is decoded under the posterior mean inferred from itself."""
    trajs = [t for t in trajs if len(t)]
    z = encoder.posterior_means(trajs, window)
    errs = []
    for tr, zi in zip(trajs, z):
        errs.append(tuple_reconstruction_errors(wm, tr.obs, tr.actions, tr.rewards, tr.next_obs,
                                                np.broadcast_to(zi, (len(tr), len(zi)))))
    return Stat.of(np.concatenate(errs))


# -- imagination alignment -------------------------------------------------------
def sfi_error(speculator, wm, encoder, real_trajs: list[Trajectory], rng: np.random.Generator | int = 0,
              policy=None, horizon: int | None = None, window: int | None = None,
              ranges: dict | None = None) -> dict:
    """Per-factor ``|g_hat - g|`` (range-normalized) on imagined rollouts of real tasks.

    Each real trajectory is encoded; the posterior mean conditions an imagined
    rollout whose factors are then speculated and compared with the truth.
    """
    rng = np.random.default_rng(rng)
    if speculator is None:
        speculator = get_speculator(wm.manifest.env_id)
    m = wm.manifest
    schema = factor_schema(m.env_id, ranges)
    z = encoder.posterior_means(real_trajs, window)
    policy = policy if policy is not None else ExplorationPolicy(m)
    s0 = np.stack([t.obs[0] for t in real_trajs])
    imagined = imagine_rollouts(wm, policy, z, s0, horizon or m.horizon, rng, ["IR"] * len(z))
    errs: dict[str, list] = {}
    for tr, im in zip(real_trajs, imagined):
        if len(im) < 3:
            continue
        guess = speculator(im)
        for k, v in guess.items():
            lo, hi = schema[k]
            errs.setdefault(k, []).append(abs(v - tr.factors[k]) / (hi - lo))
    return {k: Stat.of(v) for k, v in errs.items()}


def sci_error(encoder, wm, policy, zs: np.ndarray, rng: np.random.Generator | int = 0,
              active_dims=None, repeats: int = 3, horizon: int | None = None,
              window: int | None = None) -> Stat:
    """Re-encode imagined rollouts of each ``z`` and compare on the active dims.

    Returns the mean over ``z`` of ``mean|z_hat - z|`` with, as spread, the
    average variance of ``z_hat`` across the ``repeats`` rollouts per ``z``.
    """
    rng = np.random.default_rng(rng)
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    if len(zs) == 0:
        raise ValueError("need at least one latent vector")
    m = wm.manifest
    dims = list(range(zs.shape[1])) if active_dims is None else list(active_dims)
    policy = policy if policy is not None else ExplorationPolicy(m)
    rep = np.repeat(zs, repeats, axis=0)
    s0 = sample_initial_states(m.env_id, len(rep), rng)
    imagined = imagine_rollouts(wm, policy, rep, s0, horizon or m.horizon, rng, ["I"] * len(rep))
    z_hat = encoder.posterior_means(imagined, window).reshape(len(zs), repeats, -1)[:, :, dims]
    err = np.abs(z_hat - zs[:, None, dims]).mean(axis=(1, 2))
    spread = z_hat.var(axis=1).mean(axis=1)
    return Stat(float(err.mean()), float(spread.mean()), len(zs))
