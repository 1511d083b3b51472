"""Factor-wise interpolation on a disentangled latent space.

Each generative factor is assigned one active latent dimension.  Real tasks
give anchor values on that dimension; new task embeddings are built by
interpolating between adjacent anchors per factor and taking the Cartesian
product across factors.  Every imaginary embedding is labelled by how many of
its factors are interpolated:

1. all factors sit on anchors, but in a combination no real task has;
2. some factors interpolated, some on anchors;
3. all factors interpolated.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ANCHOR_TOL = 1e-6


class NonDisentangledError(ValueError):
    """Two generative factors map onto the same latent dimension."""


@dataclass
class FactorMap:
    factor_names: tuple
    dims: tuple  # dims[k] = latent index of factor k
    anchors: tuple  # per factor, sorted ascending anchor values
    latent_dim: int
    density: tuple = ()  # D_k per factor
    eps_scale: tuple = ()  # noise half-width per factor
    real_combos: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    scores: np.ndarray | None = None

    def __post_init__(self):
        k = len(self.factor_names)
        if len(set(self.dims)) != len(self.dims):
            raise NonDisentangledError(f"factor map is not injective: {self.dims}")
        if any(not 0 <= d < self.latent_dim for d in self.dims):
            raise ValueError("factor map points outside the latent space")
        self.anchors = tuple(np.sort(np.asarray(a, dtype=np.float64)) for a in self.anchors)
        if not self.density:
            self.density = (4,) * k
        if any(int(d) < 1 for d in self.density):
            raise ValueError("interpolation density must be >= 1")
        if not self.eps_scale:
            self.eps_scale = tuple(0.5 / d for d in self.density)

    @property
    def n_factors(self) -> int:
        return len(self.factor_names)

    @property
    def inactive_dims(self) -> list[int]:
        return [m for m in range(self.latent_dim) if m not in self.dims]


def factor_dim_scores(factors: np.ndarray, means: np.ndarray) -> np.ndarray:
    """``(K, M)`` sensitivity of each latent dim to each factor.

    Score is the variance of a latent dim explained linearly by a factor,
    ``cov(g_k, z_m)^2 / var(g_k)``; a dim that never moves scores 0.
    """
    g = np.asarray(factors, dtype=np.float64)
    z = np.asarray(means, dtype=np.float64)
    g = g - g.mean(axis=0)
    z = z - z.mean(axis=0)
    n = len(g)
    cov = g.T @ z / n
    var_g = np.maximum((g**2).mean(axis=0), 1e-300)
    return cov**2 / var_g[:, None]


def fit_factor_map(encoder, tasks, trajectories, density: int | tuple = 4, eps_scale=None,
                   window: int | None = None) -> FactorMap:
    """Assign each factor the latent dim that moves most along its sweep.

    ``trajectories[i]`` is a list of trajectories collected on ``tasks[i]``;
    a task's anchor is the average terminal posterior mean over them.
    Raises :class:`NonDisentangledError` if two factors pick the same dim.
    """
    if len(tasks) < 2:
        raise ValueError("need at least two tasks to fit a factor map")
    names = tasks[0].factor_names
    task_means = np.stack([encoder.posterior_means(list(trs), window).mean(axis=0) for trs in trajectories])
    return factor_map_from_means(names, np.stack([t.vector() for t in tasks]), task_means, density, eps_scale)


def factor_map_from_means(names, factors: np.ndarray, task_means: np.ndarray, density: int | tuple = 4,
                          eps_scale=None) -> FactorMap:
    factors = np.asarray(factors, dtype=np.float64)
    k = factors.shape[1]
    for j in range(k):
        if np.ptp(factors[:, j]) == 0:
            raise ValueError(f"factor {names[j]!r} does not vary across the given tasks")
    scores = factor_dim_scores(factors, task_means)
    dims = tuple(int(np.argmax(scores[j])) for j in range(k))
    if len(set(dims)) != len(dims):
        raise NonDisentangledError(
            f"factors {list(names)} map to latent dims {list(dims)}; the encoder is not disentangled")
    anchors = tuple(_unique(task_means[:, d]) for d in dims)
    density = (density,) * k if np.isscalar(density) else tuple(density)
    eps = () if eps_scale is None else ((eps_scale,) * k if np.isscalar(eps_scale) else tuple(eps_scale))
    return FactorMap(tuple(names), dims, anchors, task_means.shape[1], density, eps,
                     real_combos=task_means[:, list(dims)].copy(), scores=scores)


def _unique(values: np.ndarray, tol: float = ANCHOR_TOL) -> np.ndarray:
    out: list[float] = []
    for v in np.sort(values):
        if not out or v - out[-1] > tol:
            out.append(float(v))
    return np.array(out)


def interpolate_pair(z_prev, z_next, lam: float):
    """``lam * z_prev + (1 - lam) * z_next``; exact at ``lam`` 0 and 1."""
    return lam * np.asarray(z_prev, dtype=np.float64) + (1.0 - lam) * np.asarray(z_next, dtype=np.float64)


def interpolate_factor(anchors, density: int, eps_scale: float, rng: np.random.Generator | None) -> np.ndarray:
    """Interpolated values between adjacent anchors, returned sorted and de-duplicated.

    For each anchor pair ``(z_prev, z_next)`` and ``j = 0..D`` the value is
    ``lam * z_prev + (1 - lam) * z_next`` with ``lam = j / D + eps`` clipped
    to ``[0, 1]``, so ``lam = 0`` lands on ``z_next`` and ``lam = 1`` on ``z_prev``.
    """
    if int(density) < 1:
        raise ValueError("interpolation density D must be >= 1")
    anchors = np.sort(np.asarray(anchors, dtype=np.float64))
    if len(anchors) < 2:
        raise ValueError("need at least two anchors to interpolate")
    d = int(density)
    vals = []
    for lo, hi in zip(anchors[:-1], anchors[1:]):
        for j in range(d + 1):
            lam = j / d
            if eps_scale > 0:
                lam += rng.uniform(-eps_scale, eps_scale)
            lam = min(max(lam, 0.0), 1.0)
            vals.append(float(interpolate_pair(lo, hi, lam)))
    return _unique(np.array(vals), tol=0.0)


def _is_anchor(value: float, anchors: np.ndarray, tol: float = ANCHOR_TOL) -> bool:
    return bool(np.min(np.abs(anchors - value)) <= tol)


def classify_interpolation_type(z, fmap: FactorMap) -> int:
    z = np.asarray(z, dtype=np.float64)
    on_anchor = [_is_anchor(z[d], fmap.anchors[k]) for k, d in enumerate(fmap.dims)]
    if all(on_anchor):
        return 1
    if not any(on_anchor):
        return 3
    return 2


def is_real_combo(z, fmap: FactorMap, tol: float = ANCHOR_TOL) -> bool:
    if fmap.real_combos.size == 0:
        return False
    vals = np.asarray(z)[list(fmap.dims)]
    return bool(np.any(np.all(np.abs(fmap.real_combos - vals) <= tol, axis=1)))


def compose_imaginary_contexts(fmap: FactorMap, rng: np.random.Generator, count: int,
                               base_posterior_means: np.ndarray | None = None):
    """Sample ``count`` imaginary embeddings from the per-factor Cartesian product.

    Combinations identical to a real task are skipped.  Inactive dims hold the
    prior mean 0.  ``base_posterior_means`` (``(N, M)``), if given, replaces the
    fitted anchors' real combinations when deciding what counts as real.
    Returns ``[(z, type_tag), ...]``; fewer than ``count`` if the product is small.
    """
    if base_posterior_means is not None:
        fmap = FactorMap(fmap.factor_names, fmap.dims, fmap.anchors, fmap.latent_dim, fmap.density,
                         fmap.eps_scale, np.asarray(base_posterior_means)[:, list(fmap.dims)], fmap.scores)
    sets = [interpolate_factor(fmap.anchors[k], fmap.density[k], fmap.eps_scale[k], rng)
            for k in range(fmap.n_factors)]
    combos = [c for c in itertools.product(*sets)]
    out = []
    for idx in rng.permutation(len(combos)):
        z = np.zeros(fmap.latent_dim)
        z[list(fmap.dims)] = combos[idx]
        if is_real_combo(z, fmap):
            continue
        out.append((z, classify_interpolation_type(z, fmap)))
        if len(out) >= count:
            break
    return out


def write_imaginary_manifest(path, items, iteration: int | None = None, config_hash: str = "",
                             latent_dim: int | None = None) -> Path:
    """CSV with one imaginary task per row: ``iteration, type, z0..zM-1, config_hash``."""
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    m = latent_dim if latent_dim is not None else (len(items[0][0]) if items else 0)
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["iteration", "type"] + [f"z{i}" for i in range(m)] + ["config_hash"])
        for z, kind in items:
            w.writerow([iteration if iteration is not None else "", kind] + [repr(float(v)) for v in z]
                       + [config_hash])
    return path
