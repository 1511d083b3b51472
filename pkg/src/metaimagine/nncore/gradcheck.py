"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from collections.abc import Callable, Iterable

import numpy as np

from .autodiff import Tensor, backward
from .params import ParameterStore


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    stores: ParameterStore | Iterable[ParameterStore],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a pure function of the current parameter values.  The
    relative error of one coordinate is ``|a - n| / max(|a| + |n|, floor * max(1, |L|))``.
    Scaling the floor by the loss magnitude ``|L|`` keeps the check invariant
    to rescaling the loss: central-difference round-off grows with ``|L|``, so
    a fixed floor would fail large losses on coordinates whose gradient sits
    below the resolution of the estimator.
    With ``max_coords`` set, at most that many coordinates per parameter array
    are probed (chosen by ``rng``).  Sitting exactly on a relu kink gives a
    meaningless one-sided answer; perturb inputs away from kinks beforehand.
    """
    if isinstance(stores, ParameterStore):
        stores = [stores]
    stores = list(stores)
    rng = rng or np.random.default_rng(0)
    for s in stores:
        s.zero_grad()
    loss = loss_fn()
    floor = floor * max(1.0, abs(float(loss.data)))
    backward(loss)
    analytic = {}
    for s in stores:
        for name, g in s.grads().items():
            analytic[(id(s), name)] = g.copy()
        s.zero_grad()

    worst = 0.0
    for s in stores:
        for p in s:
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = rng.choice(n, size=max_coords, replace=False)
            else:
                coords = range(n)
            g_an = analytic[(id(s), p.name)].reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                lp = float(loss_fn().data)
                flat[c] = orig - eps
                lm = float(loss_fn().data)
                flat[c] = orig
                num = (lp - lm) / (2.0 * eps)
                a = g_an[c]
                err = abs(a - num) / max(abs(a) + abs(num), floor)
                worst = max(worst, err)
    return worst
