"""Multilayer perceptrons, a GRU cell and a diagonal-Gaussian output head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore

STD_FLOOR = 1e-3


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


_ACTS = {"tanh": ad.tanh, "relu": ad.relu, "identity": lambda x: x}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[in, h1, ..., out]`` plus activations.

    ``out_scale`` > 0 turns the output into ``out_scale * tanh(.)``.
    """

    widths: tuple
    hidden_act: str = "tanh"
    out_scale: float = 0.0

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"MLP needs >=1 layer with positive widths, got {self.widths}")
        if self.hidden_act not in ("tanh", "relu"):
            raise ValueError(f"unknown hidden activation {self.hidden_act!r}")

    @property
    def in_dim(self) -> int:
        return int(self.widths[0])

    @property
    def out_dim(self) -> int:
        return int(self.widths[-1])


class Mlp:
    def __init__(self, store: ParameterStore, prefix: str, spec: MlpSpec, rng: np.random.Generator,
                 out_init_scale: float = 1.0):
        self.spec = spec
        self.store = store
        self.prefix = prefix
        self.layers = []
        widths = [int(w) for w in spec.widths]
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            scale = out_init_scale if i == len(widths) - 2 else 1.0
            w = store.add(f"{prefix}.w{i}", _glorot(rng, fi, fo) * scale)
            b = store.add(f"{prefix}.b{i}", np.zeros(fo))
            self.layers.append((w, b))

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.spec.in_dim:
            raise ValueError(f"{self.prefix}: expected input dim {self.spec.in_dim}, got {x.shape[-1]}")
        act = _ACTS[self.spec.hidden_act]
        n = len(self.layers)
        for i, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if i < n - 1:
                x = act(x)
        if self.spec.out_scale > 0:
            x = ad.tanh(x) * self.spec.out_scale
        return x


def mlp_forward(store: ParameterStore, spec: MlpSpec, x, prefix: str = "mlp") -> Tensor:
    """Functional form of :class:`Mlp` over parameters already in ``store``."""
    act = _ACTS[spec.hidden_act]
    x = ad.as_tensor(x)
    if x.shape[-1] != spec.in_dim:
        raise ValueError(f"expected input dim {spec.in_dim}, got {x.shape[-1]}")
    n = len(spec.widths) - 1
    for i in range(n):
        x = x @ store[f"{prefix}.w{i}"] + store[f"{prefix}.b{i}"]
        if i < n - 1:
            x = act(x)
    if spec.out_scale > 0:
        x = ad.tanh(x) * spec.out_scale
    return x


@dataclass(frozen=True)
class GruSpec:
    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        if self.input_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("GRU dims must be positive")


class Gru:
    """GRU cell with ``h' = (1 - u) * h + u * n``.

    Gate layout inside the stacked weights is (reset, update, candidate).
    """

    def __init__(self, store: ParameterStore, prefix: str, spec: GruSpec, rng: np.random.Generator):
        self.spec = spec
        i, h = spec.input_dim, spec.hidden_dim
        self.wx = store.add(f"{prefix}.wx", _glorot(rng, i, 3 * h))
        self.wh = store.add(f"{prefix}.wh", np.concatenate(
            [np.linalg.qr(rng.normal(size=(h, h)))[0] for _ in range(3)], axis=1))
        self.bx = store.add(f"{prefix}.bx", np.zeros(3 * h))
        self.bh = store.add(f"{prefix}.bh", np.zeros(3 * h))

    def input_proj(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"GRU expected input dim {self.spec.input_dim}, got {x.shape[-1]}")
        return x @ self.wx + self.bx

    def step_proj(self, gx: Tensor, h: Tensor) -> Tensor:
        hd = self.spec.hidden_dim
        gh = h @ self.wh + self.bh
        r = ad.sigmoid(gx[..., :hd] + gh[..., :hd])
        u = ad.sigmoid(gx[..., hd:2 * hd] + gh[..., hd:2 * hd])
        n = ad.tanh(gx[..., 2 * hd:] + r * gh[..., 2 * hd:])
        return h + u * (n - h)

    def step(self, x, h) -> Tensor:
        h = ad.as_tensor(h)
        if h.shape[-1] != self.spec.hidden_dim:
            raise ValueError(f"GRU expected hidden dim {self.spec.hidden_dim}, got {h.shape[-1]}")
        return self.step_proj(self.input_proj(x), h)


def gru_step(store: ParameterStore, spec: GruSpec, x, h, prefix: str = "gru") -> Tensor:
    hd = spec.hidden_dim
    x, h = ad.as_tensor(x), ad.as_tensor(h)
    if x.shape[-1] != spec.input_dim or h.shape[-1] != hd:
        raise ValueError("GRU shape mismatch")
    gx = x @ store[f"{prefix}.wx"] + store[f"{prefix}.bx"]
    gh = h @ store[f"{prefix}.wh"] + store[f"{prefix}.bh"]
    r = ad.sigmoid(gx[..., :hd] + gh[..., :hd])
    u = ad.sigmoid(gx[..., hd:2 * hd] + gh[..., hd:2 * hd])
    n = ad.tanh(gx[..., 2 * hd:] + r * gh[..., 2 * hd:])
    return h + u * (n - h)


class GaussianHead:
    """Affine map to ``2 * out_dim`` values: mean and softplus std (+ floor)."""

    def __init__(self, store: ParameterStore, prefix: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, std_floor: float = STD_FLOOR):
        self.out_dim = out_dim
        self.std_floor = std_floor
        self.w = store.add(f"{prefix}.w", _glorot(rng, in_dim, 2 * out_dim) * 0.1)
        self.b = store.add(f"{prefix}.b", np.zeros(2 * out_dim))

    def __call__(self, features) -> tuple[Tensor, Tensor]:
        raw = ad.as_tensor(features) @ self.w + self.b
        return gaussian_split(raw, self.out_dim, self.std_floor)


def gaussian_split(raw: Tensor, out_dim: int, std_floor: float = STD_FLOOR) -> tuple[Tensor, Tensor]:
    mean = raw[..., :out_dim]
    std = ad.softplus(raw[..., out_dim:]) + std_floor
    return mean, std


def gaussian_log_density(x, mean, std) -> Tensor:
    """Sum over the last axis of the diagonal-Gaussian log density."""
    z = (ad.as_tensor(x) - mean) / std
    per_dim = -0.5 * ad.square(z) - ad.log(std) - 0.5 * np.log(2.0 * np.pi)
    return per_dim.sum(axis=-1)
