"""Recover ground-truth task factors from a trajectory by exploiting known structure."""
from __future__ import annotations

import numpy as np

from ..envlib import highway
from ..rollout import Trajectory


class NoSpeculatorError(KeyError):
    pass


def speculate_nav2d_goal(traj: Trajectory) -> dict:
    """Goal from the distance readings ``r_t = -|p_t - g|`` at visited points ``p_t``.

    Squaring gives ``|p|^2 - 2 p.g + |g|^2 = r^2``; subtracting the mean over
    all points removes ``|g|^2`` and leaves a linear least-squares system in ``g``.
    """
    p = np.asarray(traj.next_obs, dtype=np.float64)
    r2 = np.asarray(traj.rewards, dtype=np.float64) ** 2
    if len(p) < 3:
        raise ValueError("need at least three transitions to locate the goal")
    sq = (p**2).sum(axis=1)
    a = 2.0 * (p - p.mean(axis=0))
    b = (sq - sq.mean()) - (r2 - r2.mean())
    g, *_ = np.linalg.lstsq(a, b, rcond=None)
    return {"goal_x": float(g[0]), "goal_y": float(g[1])}


def speculate_highway_p(traj: Trajectory, min_ego_accel: float = 0.1) -> dict:
    """Proportional coefficient as the mean ratio of rear to ego acceleration.

    Accelerations are differenced from speeds; steps where the nearest rear
    slot is empty, clipped, or changes vehicle are skipped.
    """
    dt = highway.DT
    obs, nxt = np.asarray(traj.obs), np.asarray(traj.next_obs)
    a_ego = (nxt[:, 2] - obs[:, 2]) / dt
    r = 4 + 4 * 2  # rear1 slot offset
    a_rear = (nxt[:, r + 2] - obs[:, r + 2]) / dt + a_ego
    same_vehicle = np.abs(nxt[:, r + 1] - (obs[:, r + 1] + obs[:, r + 2] * dt)) < 1e-6
    real_slot = (np.abs(obs[:, r + 1]) < highway.PHANTOM_DY) & (np.abs(nxt[:, r + 2]) < 20.0) \
        & (np.abs(obs[:, r + 2]) < 20.0)
    pre_merge = obs[:, 0] != highway.MAIN_X
    ok = (np.abs(a_ego) > min_ego_accel) & same_vehicle & real_slot & pre_merge
    if not ok.any():
        return {"p": float("nan")}
    return {"p": float(np.mean(a_rear[ok] / a_ego[ok]))}


SPECULATORS = {"nav2d": speculate_nav2d_goal, "highway_v0": speculate_highway_p}


def get_speculator(env_id: str):
    if env_id not in SPECULATORS:
        raise NoSpeculatorError(f"no factor speculator registered for {env_id!r}")
    return SPECULATORS[env_id]
