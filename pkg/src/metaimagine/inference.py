"""Task-inference encoders q(z | context) and Gaussian posterior utilities.

Two encoders share one interface:

* :class:`GruEncoder` reads the context in order and emits a posterior after
  every transition (order-sensitive by design).
* :class:`PogEncoder` maps each transition to its own Gaussian and multiplies
  them (permutation invariant); used as an ablation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envlib import EnvManifest
from .nncore import STD_FLOOR, GaussianHead, Gru, GruSpec, Mlp, MlpSpec, ParameterStore, Tensor
from .nncore import ad
from .nncore.layers import gaussian_split
from .rollout import ContextTuple, Trajectory, feature_dim, transition_features

LATENT_DIM = 4


@dataclass
class LatentPosterior:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("posterior mean and std shapes differ")
        if not np.all(self.std > 0):
            raise ValueError("posterior std must be strictly positive")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])

    @classmethod
    def prior(cls, dim: int = LATENT_DIM) -> "LatentPosterior":
        return cls(np.zeros(dim), np.ones(dim))


def sample_latent(post: LatentPosterior, rng: np.random.Generator) -> np.ndarray:
    """Reparameterized draw ``mean + std * eps``."""
    return post.mean + post.std * rng.standard_normal(post.mean.shape)


def reparameterize(mean: Tensor, std: Tensor, eps: np.ndarray) -> Tensor:
    """Differentiable sample; gradients reach both ``mean`` and ``std``."""
    return mean + std * eps


def kl_to_prior(post: LatentPosterior) -> float:
    """Closed-form KL(N(mean, std^2) || N(0, I)), summed over dimensions."""
    m, s = post.mean, post.std
    return float(np.sum(0.5 * (s**2 + m**2 - 1.0 - 2.0 * np.log(s)), axis=-1).sum())


def kl_tensor(mean: Tensor, std: Tensor) -> Tensor:
    """Per-row KL to the unit Gaussian (sum over the last axis)."""
    per_dim = 0.5 * (ad.square(std) + ad.square(mean) - 1.0) - ad.log(std)
    return per_dim.sum(axis=-1)


def stack_features(manifest: EnvManifest, trajs: list[Trajectory], window: int | None = None):
    """Stack trajectories into ``(B, T, D)`` features plus a ``(B, T)`` validity mask.

    With ``window`` only the last ``window`` transitions of each are kept.
    """
    rows = []
    for tr in trajs:
        if window is not None and len(tr) > window:
            tr = tr.slice(len(tr) - window, len(tr))
        if len(tr) == 0:
            rows.append(np.zeros((0, feature_dim(manifest))))
        else:
            rows.append(transition_features(manifest, tr.obs, tr.actions, tr.rewards, tr.next_obs))
    t_max = max((len(r) for r in rows), default=0)
    feats = np.zeros((len(rows), t_max, feature_dim(manifest)))
    mask = np.zeros((len(rows), t_max))
    for i, r in enumerate(rows):
        feats[i, :len(r)] = r
        mask[i, :len(r)] = 1.0
    return feats, mask


class _Encoder:
    manifest: EnvManifest
    latent_dim: int
    store: ParameterStore
    kind = "base"

    def posterior_tensors(self, feats: np.ndarray, mask: np.ndarray | None = None,
                          all_steps: bool = False) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def _check_feats(self, feats: np.ndarray) -> None:
        if feats.shape[-1] != feature_dim(self.manifest):
            raise ValueError(f"context features have width {feats.shape[-1]}, "
                             f"expected {feature_dim(self.manifest)}")

    def tuples_to_features(self, tuples: list[ContextTuple]) -> np.ndarray:
        if not tuples:
            return np.zeros((0, feature_dim(self.manifest)))
        for t in tuples:
            if np.shape(t.s) != (self.manifest.obs_dim,) or np.shape(t.s_next) != (self.manifest.obs_dim,):
                raise ValueError("context tuple state dims do not match the env manifest")
            if np.size(t.a) != self.manifest.action_store_dim:
                raise ValueError("context tuple action dims do not match the env manifest")
        tr = Trajectory.from_tuples(tuples)
        return transition_features(self.manifest, tr.obs, tr.actions, tr.rewards, tr.next_obs)

    def encode(self, tuples: list[ContextTuple]) -> list[LatentPosterior]:
        """Posterior after each prefix of ``tuples``; the prior for an empty context."""
        if not tuples:
            return [LatentPosterior.prior(self.latent_dim)]
        feats = self.tuples_to_features(tuples)[None]
        mean, std = self.posterior_tensors(feats, all_steps=True)
        return [LatentPosterior(mean.data[0, t], std.data[0, t]) for t in range(len(tuples))]

    def final_posteriors(self, trajs: list[Trajectory], window: int | None = None) -> LatentPosterior:
        """Batched terminal posteriors with ``(B, M)`` mean/std; prior rows for empty contexts."""
        if not trajs:
            return LatentPosterior(np.zeros((0, self.latent_dim)), np.ones((0, self.latent_dim)))
        feats, mask = stack_features(self.manifest, trajs, window)
        if feats.shape[1] == 0:
            n = len(trajs)
            return LatentPosterior(np.zeros((n, self.latent_dim)), np.ones((n, self.latent_dim)))
        mean, std = self.posterior_tensors(feats, mask)
        mean, std = mean.data.copy(), std.data.copy()
        empty = mask.sum(axis=1) == 0
        mean[empty], std[empty] = 0.0, 1.0
        return LatentPosterior(mean, std)

    def posterior_means(self, trajs: list[Trajectory], window: int | None = None) -> np.ndarray:
        return self.final_posteriors(trajs, window).mean


class GruEncoder(_Encoder):
    """GRU over normalized ``(s, a, r, s')`` rows followed by a diagonal-Gaussian head."""

    kind = "gru"

    def __init__(self, manifest: EnvManifest, latent_dim: int = LATENT_DIM, hidden: int = 64,
                 rng: np.random.Generator | None = None, std_floor: float = STD_FLOOR):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.manifest = manifest
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden)
        self.store = ParameterStore("encoder")
        self.gru = Gru(self.store, "gru", GruSpec(feature_dim(manifest), self.hidden), rng)
        self.head = GaussianHead(self.store, "head", self.hidden, self.latent_dim, rng, std_floor)

    def posterior_tensors(self, feats, mask=None, all_steps=False):
        feats = np.asarray(feats, dtype=np.float64)
        self._check_feats(feats)
        b, t_len, _ = feats.shape
        gx_steps = ad.unstack(self.gru.input_proj(feats), axis=1)
        h = ad.as_tensor(np.zeros((b, self.hidden)))
        hs = []
        for t in range(t_len):
            h_new = self.gru.step_proj(gx_steps[t], h)
            if mask is not None and not np.all(mask[:, t]):
                # padded steps carry the hidden state through unchanged
                m = mask[:, t:t + 1]
                h = h + (h_new - h) * m
            else:
                h = h_new
            if all_steps:
                hs.append(h)
        if all_steps:
            return self.head(ad.stack(hs, axis=1))
        return self.head(h)


class PogEncoder(_Encoder):
    """Shared MLP per transition; per-transition Gaussians are multiplied together."""

    kind = "pog"

    def __init__(self, manifest: EnvManifest, latent_dim: int = LATENT_DIM, hidden: int = 64,
                 rng: np.random.Generator | None = None, std_floor: float = STD_FLOOR):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.manifest = manifest
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden)
        self.std_floor = std_floor
        self.store = ParameterStore("encoder")
        spec = MlpSpec((feature_dim(manifest), self.hidden, self.hidden, 2 * self.latent_dim), "relu")
        self.mlp = Mlp(self.store, "pog", spec, rng, out_init_scale=0.1)

    def tuple_gaussians(self, feats) -> tuple[Tensor, Tensor]:
        feats = np.asarray(feats, dtype=np.float64)
        self._check_feats(feats)
        return gaussian_split(self.mlp(feats), self.latent_dim, self.std_floor)

    def posterior_tensors(self, feats, mask=None, all_steps=False):
        mu, std = self.tuple_gaussians(feats)
        prec = 1.0 / ad.square(std)
        if mask is not None:
            prec = prec * np.asarray(mask, dtype=np.float64)[..., None]
        weighted = mu * prec
        if all_steps:
            b, t_len = np.shape(feats)[:2]
            tri = np.tril(np.ones((t_len, t_len)))  # prefix sums over time
            p_sum = ad.stack([ad.as_tensor(tri) @ prec[i] for i in range(b)], axis=0)
            w_sum = ad.stack([ad.as_tensor(tri) @ weighted[i] for i in range(b)], axis=0)
        else:
            p_sum = prec.sum(axis=1)
            w_sum = weighted.sum(axis=1)
        return w_sum / p_sum, 1.0 / ad.sqrt(p_sum)


def encode(encoder: _Encoder, tuples: list[ContextTuple]) -> list[LatentPosterior]:
    return encoder.encode(tuples)


def encode_pog(encoder: PogEncoder, tuples: list[ContextTuple]) -> LatentPosterior:
    """Precision-weighted product of the per-transition Gaussians."""
    if not tuples:
        raise ValueError("product-of-Gaussians encoder needs at least one context tuple")
    feats = encoder.tuples_to_features(tuples)[None]
    mean, std = encoder.posterior_tensors(feats)
    return LatentPosterior(mean.data[0], std.data[0])


def product_of_gaussians(means: np.ndarray, stds: np.ndarray) -> LatentPosterior:
    """Multiply diagonal Gaussians stacked along axis 0."""
    prec = 1.0 / np.asarray(stds, dtype=np.float64) ** 2
    p = prec.sum(axis=0)
    return LatentPosterior((np.asarray(means) * prec).sum(axis=0) / p, 1.0 / np.sqrt(p))


def make_encoder(kind: str, manifest: EnvManifest, latent_dim: int = LATENT_DIM, hidden: int = 64,
                 rng: np.random.Generator | None = None) -> _Encoder:
    if kind == "gru":
        return GruEncoder(manifest, latent_dim, hidden, rng)
    if kind in ("pog", "mlp"):
        return PogEncoder(manifest, latent_dim, hidden, rng)
    raise ValueError(f"unknown encoder kind {kind!r}")
