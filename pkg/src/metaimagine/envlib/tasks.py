"""Task specifications: the ground-truth generative factors of one MDP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ENV_IDS = ("nav2d", "cartpole", "highway_v0")

# closed ranges per factor, in declaration order
FACTOR_SCHEMAS: dict[str, dict[str, tuple[float, float]]] = {
    "nav2d": {"goal_x": (-2.0, 2.0), "goal_y": (0.0, 2.0)},
    "cartpole": {"gravity_scale": (0.1, 2.0), "force_mag": (5.0, 15.0)},
    "highway_v0": {"traffic_speed": (20.0, 30.0), "p": (-1.0, 1.0)},
}


class TaskSpecError(ValueError):
    pass


def factor_schema(env_id: str, overrides: dict | None = None) -> dict[str, tuple[float, float]]:
    if env_id not in FACTOR_SCHEMAS:
        raise TaskSpecError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}")
    schema = dict(FACTOR_SCHEMAS[env_id])
    for k, rng in (overrides or {}).items():
        if k not in schema:
            raise TaskSpecError(f"{env_id} has no factor {k!r}")
        lo, hi = float(rng[0]), float(rng[1])
        if not lo <= hi:
            raise TaskSpecError(f"bad range for {k!r}: {rng}")
        schema[k] = (lo, hi)
    return schema


@dataclass(frozen=True)
class TaskSpec:
    env_id: str
    factors: dict = field(default_factory=dict)
    ranges: dict | None = None

    def __post_init__(self):
        schema = factor_schema(self.env_id, self.ranges)
        if set(self.factors) != set(schema):
            raise TaskSpecError(
                f"{self.env_id} factors must be exactly {sorted(schema)}, got {sorted(self.factors)}")
        for k, (lo, hi) in schema.items():
            v = float(self.factors[k])
            if not (lo <= v <= hi) or not np.isfinite(v):
                raise TaskSpecError(f"factor {k}={v} outside [{lo}, {hi}] for {self.env_id}")

    @property
    def factor_names(self) -> list[str]:
        return list(factor_schema(self.env_id, self.ranges))

    def vector(self) -> np.ndarray:
        return np.array([float(self.factors[k]) for k in self.factor_names])

    def normalized(self) -> np.ndarray:
        """Factors mapped to [0, 1] by their declared ranges."""
        schema = factor_schema(self.env_id, self.ranges)
        out = []
        for k, (lo, hi) in schema.items():
            out.append((float(self.factors[k]) - lo) / (hi - lo) if hi > lo else 0.0)
        return np.array(out)

    def with_factor(self, name: str, value: float) -> "TaskSpec":
        f = dict(self.factors)
        f[name] = float(value)
        return TaskSpec(self.env_id, f, self.ranges)

    def __hash__(self):
        return hash((self.env_id, tuple(sorted(self.factors.items()))))


def sample_task_specs(env_id: str, n: int, rng: np.random.Generator | int,
                      ranges: dict | None = None) -> list[TaskSpec]:
    """``n`` specs with every factor i.i.d. uniform over its range."""
    if n < 1:
        raise TaskSpecError("need n >= 1 task specs")
    rng = np.random.default_rng(rng)
    schema = factor_schema(env_id, ranges)
    specs = []
    for _ in range(n):
        factors = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in schema.items()}
        specs.append(TaskSpec(env_id, factors, ranges))
    return specs


def grid_shape(n: int, n_factors: int = 2) -> tuple:
    """Most balanced per-factor level counts whose product is ``n`` (first factor largest)."""
    if n < 1:
        raise TaskSpecError("need n >= 1 task specs")
    if n_factors == 1:
        return (n,)
    best = None
    for a in range(1, n + 1):
        if n % a == 0:
            rest = grid_shape(n // a, n_factors - 1)
            shape = (a,) + rest
            if a >= max(rest) and (best is None or max(shape) < max(best)):
                best = shape
    return best if best is not None else (n,) + (1,) * (n_factors - 1)


def grid_task_specs(env_id: str, per_factor, margin: float = 0.125,
                    ranges: dict | None = None) -> list[TaskSpec]:
    """Full factorial grid with ``per_factor`` levels (int, or one count per factor).

    Levels are evenly spaced on ``[lo + margin*w, hi - margin*w]``.
    """
    schema = factor_schema(env_id, ranges)
    counts = [int(per_factor)] * len(schema) if np.isscalar(per_factor) else [int(c) for c in per_factor]
    if len(counts) != len(schema) or min(counts) < 1:
        raise TaskSpecError(f"bad per-factor level counts {per_factor!r}")
    levels = []
    for (lo, hi), per_factor in zip(schema.values(), counts):
        w = hi - lo
        levels.append(np.linspace(lo + margin * w, hi - margin * w, per_factor) if per_factor > 1
                      else np.array([0.5 * (lo + hi)]))
    mesh = np.meshgrid(*levels, indexing="ij")
    names = list(schema)
    return [TaskSpec(env_id, {k: float(m.flat[i]) for k, m in zip(names, mesh)}, ranges)
            for i in range(mesh[0].size)]


def hull_task_specs(train: list[TaskSpec], n: int, rng: np.random.Generator | int) -> list[TaskSpec]:
    """Specs drawn uniformly inside the per-factor bounding box of ``train``."""
    rng = np.random.default_rng(rng)
    vecs = np.stack([t.vector() for t in train])
    lo, hi = vecs.min(axis=0), vecs.max(axis=0)
    names = train[0].factor_names
    out = []
    for _ in range(n):
        v = rng.uniform(lo, hi)
        out.append(TaskSpec(train[0].env_id, dict(zip(names, map(float, v))), train[0].ranges))
    return out
