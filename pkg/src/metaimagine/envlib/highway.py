"""Highway on-ramp merging with a proportional rear vehicle (v0 variant).

Coordinates: the ego drives on a ramp (lateral position ``RAMP_X``) next to a
single main lane (``MAIN_X``).  Longitudinal positions are global; the
observation reports the ego's remaining distance to the end of the merge area
and, for the two nearest main-lane vehicles ahead and behind, their offsets
``other - ego`` (positive ``dy`` means ahead).  Lateral motion is a one-step
lane switch, so lateral velocities are always zero.
"""
from __future__ import annotations

import math

import numpy as np

from .core import EnvManifest, Environment, EnvState
from .idm import IdmParams, desired_gap, idm_acceleration, proportional_acceleration

DT = 0.1
HORIZON = 150
MERGE_LENGTH = 150.0
RAMP_X = 2.0
MAIN_X = 6.0
VEHICLE_LENGTH = 5.0
EGO_ACCEL = 1.5
ACCEL_LIMIT = 3.0
V_MAX = 50.0
PHANTOM_DY = 150.0
N_MAIN = 4

ACTION_IDLE, ACTION_LEFT, ACTION_RIGHT, ACTION_FASTER, ACTION_SLOWER = range(5)

_EGO_RANGES = [(0.0, 12.0), (0.0, 150.0), (0.0, 50.0), (0.0, 10.0)]
_REL_RANGES = [(-10.0, 10.0), (-150.0, 150.0), (-20.0, 20.0), (-10.0, 10.0)]
_SLOTS = ("front1", "front2", "rear1", "rear2")

MANIFEST = EnvManifest(
    env_id="highway_v0",
    obs_names=("x", "y", "vx", "vy") + tuple(f"{s}_{q}" for s in _SLOTS for q in ("dx", "dy", "dvx", "dvy")),
    obs_low=tuple(lo for lo, _ in _EGO_RANGES + _REL_RANGES * 4),
    obs_high=tuple(hi for _, hi in _EGO_RANGES + _REL_RANGES * 4),
    action_kind="discrete",
    action_dim=5,
    action_low=0.0,
    action_high=4.0,
    horizon=HORIZON,
    dt=DT,
    reward_scale=0.1,
    normalize_obs=True,
    factors={},
)


def ego_command(action: int) -> float:
    return {ACTION_FASTER: EGO_ACCEL, ACTION_SLOWER: -EGO_ACCEL}.get(int(action), 0.0)


def lane_after(x: float | np.ndarray, action) -> np.ndarray:
    """Lateral position after the one-step lane switch (left = towards main lane)."""
    x = np.asarray(x, dtype=np.float64)
    action = np.asarray(action)
    left = np.where(x < MAIN_X, MAIN_X, x)
    right = np.where(x > RAMP_X, RAMP_X, x)
    return np.where(action == ACTION_LEFT, left, np.where(action == ACTION_RIGHT, right, x))


def highway_reward(state, action: int, info: dict, sign_mode: str = "negate_deviation",
                   rear_term: str = "accel") -> float:
    """Four-term merge reward ``-R_v - R_m + R_c + R_a``.

    ``info`` carries ``v_ego``, ``v_env``, ``gap_front``/``dv_front`` and
    ``gap_rear``/``v_rear``/``dv_rear`` (``None`` if the slot is empty),
    ``rear_accel``/``rear_accel_prev``, ``crashed`` and ``idm``.
    ``sign_mode="as_written"`` sums the four terms without negation.
    ``rear_term="accel"`` (default) penalises a braking rear vehicle;
    ``"jerk"`` penalises a decreasing rear acceleration instead.
    """
    params: IdmParams = info["idm"]
    r_v = min(max(abs(info["v_ego"] - info["v_env"]) / 10.0, 0.0), 1.0)
    r_m = 0.0
    if info.get("gap_front") is not None:
        s_star = desired_gap(info["v_ego"], info["dv_front"], params)
        r_m += max(s_star - info["gap_front"], 0.0) / s_star
    if info.get("gap_rear") is not None:
        s_star = desired_gap(info["v_rear"], info["dv_rear"], params)
        r_m += max(s_star - info["gap_rear"], 0.0) / s_star
    if rear_term == "jerk":
        braking = (info["rear_accel"] - info["rear_accel_prev"]) / DT < 0
    else:
        braking = info["rear_accel"] < 0
    r_m += 20.0 * float(braking)
    r_c = -50.0 if info.get("crashed") else 0.0
    a = int(action)
    r_a = -1.0 if a in (ACTION_LEFT, ACTION_RIGHT) else (-0.2 if a in (ACTION_FASTER, ACTION_SLOWER) else 0.0)
    if sign_mode == "as_written":
        return r_v + r_m + r_c + r_a
    return -r_v - r_m + r_c + r_a


class HighwayMergeEnv(Environment):
    manifest = MANIFEST
    sign_mode = "negate_deviation"
    rear_term = "accel"

    @property
    def traffic_speed(self) -> float:
        return self.factors["traffic_speed"]

    @property
    def p(self) -> float:
        return self.factors["p"]

    @property
    def idm(self) -> IdmParams:
        return IdmParams(desired_speed=self.traffic_speed)

    # -- internal vehicle bookkeeping -------------------------------------
    def _reset(self) -> EnvState:
        rng = self.rng
        v_env = self.traffic_speed
        self.ego_s = 0.0
        self.ego_x = RAMP_X
        self.ego_v = float(v_env * rng.uniform(0.8, 1.0))
        f1 = rng.uniform(10.0, 30.0)
        f2 = f1 + rng.uniform(15.0, 35.0)
        r1 = -rng.uniform(10.0, 30.0)
        r2 = r1 - rng.uniform(15.0, 35.0)
        self.main_s = np.array([f2, f1, r1, r2])
        self.main_v = v_env * rng.uniform(0.9, 1.0, size=N_MAIN)
        self.rear_accel_prev = 0.0
        self.merged = False
        obs = self._observe()
        return EnvState(obs, False, 0, {"terminal": False, "merged": False, "crashed": False})

    def _rear_index(self):
        behind = np.nonzero(self.main_s < self.ego_s)[0]
        if behind.size == 0:
            return None
        return int(behind[np.argmax(self.main_s[behind])])

    def _front_index(self):
        ahead = np.nonzero(self.main_s >= self.ego_s)[0]
        if ahead.size == 0:
            return None
        return int(ahead[np.argmin(self.main_s[ahead])])

    def _observe(self) -> np.ndarray:
        rel = self.main_s - self.ego_s
        ahead = sorted(np.nonzero(rel >= 0)[0], key=lambda i: rel[i])
        behind = sorted(np.nonzero(rel < 0)[0], key=lambda i: -rel[i])
        obs = [self.ego_x, MERGE_LENGTH - self.ego_s, self.ego_v, 0.0]
        for group, sign in ((ahead, 1.0), (behind, -1.0)):
            for k in range(2):
                if k < len(group):
                    i = group[k]
                    obs += [MAIN_X - self.ego_x, rel[i], self.main_v[i] - self.ego_v, 0.0]
                else:
                    obs += [MAIN_X - self.ego_x, sign * PHANTOM_DY, 0.0, 0.0]
        return self.manifest.clip_obs(np.array(obs))

    def _main_accelerations(self, a_rear: float, rear: int | None) -> np.ndarray:
        params = self.idm
        order = np.argsort(-self.main_s)
        acc = np.zeros(N_MAIN)
        for rank, i in enumerate(order):
            if i == rear and not self.merged:
                acc[i] = a_rear
                continue
            if rank == 0:
                a = idm_acceleration(self.main_v[i], 0.0, math.inf, params)
            else:
                lead = order[rank - 1]
                gap = max(self.main_s[lead] - self.main_s[i] - VEHICLE_LENGTH, 0.1)
                a = idm_acceleration(self.main_v[i], self.main_v[i] - self.main_v[lead], gap, params)
            acc[i] = min(max(a, -ACCEL_LIMIT), ACCEL_LIMIT)
        return acc

    def _step(self, action):
        rear = self._rear_index()
        cmd = ego_command(action)
        a_ego = min(max(cmd, -self.ego_v / DT), (V_MAX - self.ego_v) / DT)
        a_rear = proportional_acceleration(a_ego, self.p)
        acc = self._main_accelerations(a_rear, rear)
        # keep main-lane speeds non-negative
        acc = np.maximum(acc, -self.main_v / DT)

        self.ego_s += self.ego_v * DT
        self.ego_v += a_ego * DT
        self.main_s = self.main_s + self.main_v * DT
        self.main_v = self.main_v + acc * DT

        new_x = float(lane_after(self.ego_x, action))
        merged = new_x == MAIN_X and self.ego_x != MAIN_X
        self.ego_x = new_x
        crashed = False
        if merged:
            self.merged = True
            crashed = bool(np.any(np.abs(self.main_s - self.ego_s) < VEHICLE_LENGTH))
        elif MERGE_LENGTH - self.ego_s <= 0.0:
            crashed = True

        front, rear_now = self._front_index(), self._rear_index()
        info = {
            "v_ego": self.ego_v,
            "v_env": self.traffic_speed,
            "ego_accel": a_ego,
            "rear_accel": a_rear,
            "rear_accel_prev": self.rear_accel_prev,
            "rear_index": rear,
            "main_accel": acc.copy(),
            "crashed": crashed,
            "merged": merged and not crashed,
            "idm": self.idm,
            "gap_front": None,
            "gap_rear": None,
        }
        if front is not None:
            info["gap_front"] = float(self.main_s[front] - self.ego_s - VEHICLE_LENGTH)
            info["dv_front"] = float(self.ego_v - self.main_v[front])
        if rear_now is not None:
            info["gap_rear"] = float(self.ego_s - self.main_s[rear_now] - VEHICLE_LENGTH)
            info["v_rear"] = float(self.main_v[rear_now])
            info["dv_rear"] = float(self.main_v[rear_now] - self.ego_v)
        reward = highway_reward(None, action, info, self.sign_mode, self.rear_term)
        self.rear_accel_prev = a_rear

        t = self._state.step_index + 1
        terminal = crashed or merged
        info["terminal"] = terminal
        return EnvState(self._observe(), terminal or t >= HORIZON, t, info), reward
