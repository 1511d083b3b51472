"""Named parameter containers and the Adam optimizer."""
from __future__ import annotations

import hashlib
from collections.abc import Iterator

import numpy as np

from .autodiff import DTYPE, Param


class ParameterStore:
    """Named, shaped float64 arrays with gradient slots and Adam moments.

    Names are unique within a store.  Gradients live on the :class:`Param`
    objects and are populated by :func:`~metaimagine.nncore.autodiff.backward`.
    """

    def __init__(self, name: str = "params"):
        self.name = name
        self._params: dict[str, Param] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r} in store {self.name!r}")
        p = Param(value, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def size(self) -> int:
        return sum(p.data.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; parameters untouched by backward report zeros."""
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self._params.items()}

    def has_grad(self) -> bool:
        return any(p.grad is not None for p in self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            p = self._params[n]
            arr = np.asarray(arr, dtype=DTYPE)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {n!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def copy_from(self, other: "ParameterStore", tau: float = 1.0) -> None:
        """``self <- (1 - tau) * self + tau * other`` over matching names."""
        for n, p in self._params.items():
            src = other._params[n].data
            if tau == 1.0:
                p.data = src.copy()
            elif tau != 0.0:
                p.data = (1.0 - tau) * p.data + tau * src

    def digest(self) -> str:
        h = hashlib.sha256()
        for n in sorted(self._params):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].data).tobytes())
        return h.hexdigest()

    def clone(self, name: str | None = None) -> "ParameterStore":
        out = ParameterStore(name or self.name)
        for n, p in self._params.items():
            out.add(n, p.data.copy())
        return out


def merge_stores(*stores: ParameterStore) -> list[Param]:
    return [p for s in stores for p in s]


def clip_grad_norm(stores, max_norm: float) -> float:
    params = [p for s in stores for p in s if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


def adam_update(
    store: ParameterStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step over every parameter holding a gradient.

    Gradients are reset afterwards.  Raises if no gradient was populated.
    """
    if not store.has_grad():
        raise RuntimeError(f"adam_update on store {store.name!r} before any backward pass")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store._params.items():
        g = p.grad
        if g is None:
            continue
        m = store._m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            store._v[name] = np.zeros_like(p.data)
        v = store._v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store._m[name] = m
        store._v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None
