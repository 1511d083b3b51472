"""Independent reference implementations used as test oracles.

Written directly from the textbook formulas without sharing code with the
package, so agreement is meaningful.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def idm_direct(v, v_lead, gap, v0, T=1.5, s0=2.0, a=1.5, b=2.0, delta=4.0):
    s_star = s0 + max(0.0, v * T + v * (v - v_lead) / (2.0 * math.sqrt(a * b)))
    return a * (1.0 - (v / v0) ** delta - (s_star / gap) ** 2)


def nav2d_reward_direct(x, y, gx, gy):
    dx, dy = x - gx, y - gy
    return -math.sqrt(dx * dx + dy * dy)


def cartpole_reward_direct(x, xd, th, thd, thrd=0.418):
    return 2 - 0.3 * math.tanh(abs(x)) - 0.2 * math.tanh(abs(xd)) - 0.3 * math.tanh(abs(th - thrd)) \
        - 0.2 * math.tanh(abs(thd))


def cartpole_step_direct(state, force, g, mc=1.0, mp=0.1, l=0.5, tau=0.02):
    """Frictionless cart-pole: solve the 2x2 linear system for the accelerations."""
    x, xd, th, thd = state
    c, s = math.cos(th), math.sin(th)
    # (mc+mp) xdd + mp l c thdd = F + mp l thd^2 s
    # c xdd + (4/3) l thdd = g s
    m = np.array([[mc + mp, mp * l * c], [c, 4.0 / 3.0 * l]])
    rhs = np.array([force + mp * l * thd**2 * s, g * s])
    xdd, thdd = np.linalg.solve(m, rhs)
    return np.array([x + tau * xd, xd + tau * xdd, th + tau * thd, thd + tau * thdd])


def cluster_losses_bruteforce(groups, sigma):
    """Intra: per task, mean distance to the centroid (summed over tasks).
    Inter: clipped margin over every unordered pair of centroids."""
    cents = []
    intra = 0.0
    for g in groups:
        g = [list(map(float, row)) for row in g]
        k = len(g)
        c = [sum(row[d] for row in g) / k for d in range(len(g[0]))]
        cents.append(c)
        intra += sum(math.sqrt(sum((row[d] - c[d]) ** 2 for d in range(len(c)))) for row in g) / k
    inter = 0.0
    for a, b in itertools.combinations(cents, 2):
        dist = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
        inter += min(max(sigma - dist, 0.0), sigma)
    return intra, inter


def gaussian_kl_direct(mu, sd):
    """KL(N(mu, sd^2) || N(0, 1)) per dimension, summed."""
    return float(sum(0.5 * (s * s + m * m - 1.0) - math.log(s) for m, s in zip(mu, sd)))
