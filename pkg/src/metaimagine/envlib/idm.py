"""Car-following laws used by main-lane traffic."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 30.0  # v0, m/s
    time_headway: float = 1.5  # T, s
    min_gap: float = 2.0  # s0, m
    max_accel: float = 1.5  # a_max, m/s^2
    comfortable_decel: float = 2.0  # b, m/s^2
    exponent: float = 4.0  # delta

    def __post_init__(self):
        for name in ("desired_speed", "time_headway", "min_gap", "max_accel", "comfortable_decel", "exponent"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be strictly positive")


def desired_gap(v: float, dv: float, params: IdmParams) -> float:
    """s*(v, dv) with ``dv`` the approach rate ``v - v_leader``."""
    dyn = v * params.time_headway + v * dv / (2.0 * math.sqrt(params.max_accel * params.comfortable_decel))
    return params.min_gap + max(0.0, dyn)


def idm_acceleration(v: float, dv: float, s: float, params: IdmParams) -> float:
    """IDM acceleration for speed ``v``, approach rate ``dv`` and bumper gap ``s``.

    ``s = math.inf`` gives the free-road term.
    """
    if not s > 0:
        raise ValueError(f"IDM gap must be positive, got {s}")
    free = (v / params.desired_speed) ** params.exponent
    interact = 0.0 if math.isinf(s) else (desired_gap(v, dv, params) / s) ** 2
    return params.max_accel * (1.0 - free - interact)


def proportional_acceleration(a_ego: float, p: float) -> float:
    """Rear-vehicle response that mirrors the ego acceleration scaled by ``p``."""
    if not -1.0 <= p <= 1.0:
        raise ValueError(f"proportion p must lie in [-1, 1], got {p}")
    return p * a_ego
