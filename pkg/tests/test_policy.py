from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metaimagine.envlib import get_manifest
from metaimagine.nncore import ad, finite_diff_check
from metaimagine.policy import Batch, ReplayBuffer, SacAgent, SacConfig, squash_log_prob
from metaimagine.rollout import Trajectory


def fake_batch(manifest, n, rng, terminal_every=0):
    d = manifest.obs_dim
    obs = rng.uniform(-0.5, 0.5, (n, d)) * np.array(manifest.obs_high)
    if manifest.discrete:
        actions = rng.integers(0, manifest.action_dim, (n, 1)).astype(np.float64)
    else:
        actions = rng.uniform(-0.9, 0.9, (n, manifest.action_dim))
    term = np.zeros(n, dtype=bool)
    if terminal_every:
        term[::terminal_every] = True
    return Batch(obs, actions, rng.standard_normal(n), obs * 0.9, term, np.array(["R"] * n, dtype=object),
                 np.zeros(n, dtype=object), np.zeros((n, 4)))


# -- replay buffer -----------------------------------------------------------
def make_traj(n, tag="R", task=0, offset=0.0):
    obs = np.arange(n, dtype=np.float64)[:, None].repeat(2, axis=1) + offset
    return Trajectory(obs, np.zeros((n, 2)), np.arange(n, dtype=np.float64), obs + 1, np.zeros(n, dtype=bool),
                      task, tag, z=np.ones(4) if tag != "R" else None)


def test_buffer_counts_by_source_and_recent_window():
    buf = ReplayBuffer(2, 2, 4, capacity=100, recent=5)
    buf.add_trajectory(make_traj(8, "R", 0))
    buf.add_trajectory(make_traj(4, "I", 1))
    buf.add_trajectory(make_traj(3, "IR", 0))
    assert buf.count() == 15 and buf.count(source="R") == 8 and buf.count(0, ("R", "IR")) == 11
    assert buf.count(0, recent_only=True) == 5
    assert buf.count(0, "R", recent_only=True) == 2
    b = buf.sample(4, np.random.default_rng(0), source="I")
    assert set(b.tags) == {"I"} and np.all(b.z == 1.0) and len(np.unique(b.obs[:, 0])) == 4
    with pytest.raises(ValueError):
        buf.sample(3, np.random.default_rng(0), task=0, source="R", recent_only=True)


def test_buffer_ordered_sample_keeps_insertion_order():
    buf = ReplayBuffer(2, 2, 4, capacity=100)
    buf.add_trajectory(make_traj(30))
    b = buf.sample(10, np.random.default_rng(1), task=0, ordered=True)
    assert np.all(np.diff(b.obs[:, 0]) > 0)


def test_buffer_clear_and_capacity():
    buf = ReplayBuffer(2, 2, 4, capacity=10)
    buf.add_trajectory(make_traj(25, "R", 0))
    assert buf.count(0) == 10
    assert buf.sample(10, np.random.default_rng(0), task=0).obs[:, 0].min() == 15
    buf.add_trajectory(make_traj(3, "I", "imag"))
    buf.clear(source="I")
    assert buf.count(source="I") == 0 and buf.count(source="R") == 10
    buf.clear()
    assert buf.count() == 0
    with pytest.raises(ValueError):
        buf.add(0, np.zeros(2), np.zeros(2), 0.0, np.zeros(2), False, tag="X")


# -- SAC losses ----------------------------------------------------------------
@given(st.floats(-3, 3), st.floats(-2, 1), st.floats(-2.5, 2.5))
def test_squashed_log_prob_change_of_variables(mean, log_std, eps):
    u = mean + np.exp(log_std) * eps
    got = squash_log_prob(ad.as_tensor(np.array([[u]])), ad.as_tensor(np.array([[mean]])),
                          ad.as_tensor(np.array([[log_std]])), np.array([[eps]])).data[0]
    gauss = -0.5 * eps**2 - log_std - 0.5 * np.log(2 * np.pi)
    assert got == pytest.approx(gauss - np.log(1 - np.tanh(u) ** 2 + 1e-300), rel=1e-9, abs=1e-6)


def test_discrete_target_is_exact_expectation():
    m = get_manifest("highway_v0")
    rng = np.random.default_rng(0)
    agent = SacAgent(m, 4, SacConfig(hidden=16), rng)
    b = fake_batch(m, 6, rng, terminal_every=3)
    z = rng.standard_normal((6, 4))
    y = agent.target_values(b, z, rng)
    logits = agent.pi(agent._state_in(b.next_obs, z)).data
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    tq1, tq2 = agent.q_values(b.next_obs, None, z, agent.target)
    v = (p * (np.minimum(tq1.data, tq2.data) - 0.2 * np.log(p))).sum(1)
    expect = b.rewards * m.reward_scale + 0.99 * (1 - b.terminals) * v
    np.testing.assert_allclose(y, expect, rtol=1e-10)
    np.testing.assert_allclose(y[b.terminals], (b.rewards * m.reward_scale)[b.terminals])


@pytest.mark.parametrize("env_id", ["nav2d", "cartpole", "highway_v0"])
def test_critic_and_actor_losses_gradcheck(env_id):
    m = get_manifest(env_id)
    rng = np.random.default_rng(0)
    agent = SacAgent(m, 4, SacConfig(hidden=8), rng)
    b = fake_batch(m, 5, rng)
    z = rng.standard_normal((5, 4))
    y = agent.target_values(b, z, rng)
    assert finite_diff_check(lambda: agent.critic_loss(b, z, rng, target=y), agent.critic) < 1e-4
    eps = rng.standard_normal((5, m.action_dim))
    assert finite_diff_check(lambda: agent.actor_loss(b, z, rng, eps=eps), agent.actor) < 1e-4


def test_update_moves_target_by_polyak_average():
    m = get_manifest("nav2d")
    rng = np.random.default_rng(0)
    agent = SacAgent(m, 4, SacConfig(hidden=8, tau=0.1), rng)
    old_target = agent.target.state_dict()
    b = fake_batch(m, 16, rng)
    agent.update((b, np.zeros((16, 4))), rng)
    new_critic = agent.critic.state_dict()
    for k, v in agent.target.state_dict().items():
        np.testing.assert_allclose(v, 0.1 * new_critic[k] + 0.9 * old_target[k], rtol=1e-12)


def test_zero_imaginary_rate_equals_real_only_update():
    m = get_manifest("cartpole")
    a1 = SacAgent(m, 4, SacConfig(hidden=8, lr_imag=0.0), np.random.default_rng(0))
    a2 = SacAgent(m, 4, SacConfig(hidden=8, lr_imag=0.0), np.random.default_rng(0))
    rng = np.random.default_rng(5)
    real, imag = fake_batch(m, 8, rng), fake_batch(m, 8, rng)
    z = np.zeros((8, 4))
    a1.update((real, z), np.random.default_rng(1))
    a2.update((real, z), np.random.default_rng(1), imag=(imag, z))
    assert a1.actor.digest() == a2.actor.digest() and a1.critic.digest() == a2.critic.digest()


def test_deterministic_actions_in_bounds():
    m = get_manifest("nav2d")
    agent = SacAgent(m, 4, SacConfig(hidden=8), np.random.default_rng(0))
    a = agent.act(np.zeros((3, 2)), np.zeros(4), np.random.default_rng(0), deterministic=True)
    assert a.shape == (3, 2) and np.all(np.abs(a) <= 1.0)
    hw = SacAgent(get_manifest("highway_v0"), 4, SacConfig(hidden=8), np.random.default_rng(0))
    idx = hw.act(np.zeros((3, 20)), np.zeros(4), np.random.default_rng(0))
    assert idx.shape == (3, 1) and set(idx.ravel()) <= set(range(5))


def test_sac_config_validation():
    with pytest.raises(ValueError):
        SacConfig(gamma=1.0)
    with pytest.raises(ValueError):
        SacConfig(tau=0.0)
