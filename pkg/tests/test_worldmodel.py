from __future__ import annotations

import numpy as np
import pytest

from metaimagine.envlib import TaskSpec, get_manifest, highway, make_env, sample_task_specs
from metaimagine.envlib.cartpole import cartpole_accelerations, euler_integrate
from metaimagine.nncore import finite_diff_check
from metaimagine.rollout import ExplorationPolicy, collect_episodes
from metaimagine.worldmodel import (
    ImaginationError,
    PhysicsTemplate,
    WorldModel,
    imagine_rollout,
    imagine_rollouts,
    integrate_nodes,
    physics_template,
    transition_error_t,
)


def test_nav2d_template_is_exact_and_has_no_transition_params():
    m = get_manifest("nav2d")
    wm = WorldModel(m, physics_template(m), rng=np.random.default_rng(0))
    assert not any(n.startswith("trans") for n in wm.store.names())
    rng = np.random.default_rng(1)
    s, a = rng.uniform(-2, 2, (50, 2)), rng.uniform(-1, 1, (50, 2))
    np.testing.assert_array_equal(wm.predict_transition(s, a, np.zeros((50, 4))), np.clip(s + 0.1 * a, -4, 4))


def test_nav2d_imagination_reproduces_env_states():
    m = get_manifest("nav2d")
    wm = WorldModel(m, physics_template(m), rng=np.random.default_rng(0))
    env = make_env(TaskSpec("nav2d", {"goal_x": 1.0, "goal_y": 1.0}), 0)
    tr = collect_episodes([env], ExplorationPolicy(m), None, np.random.default_rng(3))[0]

    class Replay:
        t = 0

        def __call__(self, s, z, rng):
            a = tr.actions[self.t][None]
            self.t += 1
            return a

    im = imagine_rollout(wm, Replay(), np.zeros(4), tr.obs[0], len(tr), np.random.default_rng(0))
    np.testing.assert_array_equal(im.next_obs, tr.next_obs)


def test_cartpole_integrator_matches_simulator_bitwise():
    rng = np.random.default_rng(0)
    s = rng.uniform(-0.3, 0.3, (20, 4))
    force = rng.choice([-10.0, 10.0], 20)
    xa, ta = cartpole_accelerations(s, force, 9.8)
    tmpl = physics_template(get_manifest("cartpole"))
    out = integrate_nodes(tmpl, s, force[:, None] > 0, np.stack([xa, ta], axis=1)).data
    assert np.array_equal(out, euler_integrate(s, xa, ta))


def test_highway_integrator_with_true_accelerations_matches_env():
    m = get_manifest("highway_v0")
    tmpl = physics_template(m)
    env = make_env(TaskSpec("highway_v0", {"traffic_speed": 24.0, "p": 0.6}), 2)
    s = env.reset().observation
    checked = 0
    for a in [3, 3, 0, 4, 4, 3, 0, 0, 4, 3] * 3:
        rel = env.main_s - env.ego_s
        ahead = sorted(np.nonzero(rel >= 0)[0], key=lambda i: rel[i])
        behind = sorted(np.nonzero(rel < 0)[0], key=lambda i: -rel[i])
        slots = (ahead + [None, None])[:2] + (behind + [None, None])[:2]
        st_, _ = env.step(a)
        nodes = [st_.info["ego_accel"]] + [0.0 if i is None else st_.info["main_accel"][i] for i in slots]
        pred = m.clip_obs(integrate_nodes(tmpl, s[None], np.array([[a]]), np.array([nodes])).data[0])
        rel_new = env.main_s - env.ego_s
        same_order = sorted(np.nonzero(rel_new >= 0)[0], key=lambda i: rel_new[i])[:2] == ahead[:2] \
            and sorted(np.nonzero(rel_new < 0)[0], key=lambda i: -rel_new[i])[:2] == behind[:2]
        if same_order and None not in slots:
            np.testing.assert_allclose(pred, st_.observation, atol=1e-9)
            checked += 1
        s = st_.observation
        if st_.done:
            break
    assert checked >= 10


def test_template_json_roundtrip_and_validation():
    for env_id in ("nav2d", "cartpole", "highway_v0"):
        m = get_manifest(env_id)
        for phys in (True, False):
            t = physics_template(m, phys)
            assert PhysicsTemplate.from_json(t.to_json()) == t
            t.validate(m)
    bad = PhysicsTemplate("x", "nav2d", (("agent", (0,)),), (), ())
    with pytest.raises(ValueError):
        bad.validate(get_manifest("nav2d"))


def test_node_bounds_respected():
    m = get_manifest("highway_v0")
    wm = WorldModel(m, rng=np.random.default_rng(0))
    for net, _ in wm.node_nets:
        for i, (w, b) in enumerate(net.layers):
            w.data = w.data * 50.0
    rng = np.random.default_rng(1)
    s = np.stack([make_env(sp, 0).reset().observation for sp in sample_task_specs("highway_v0", 8, rng)])
    nodes = wm.nodes_t(s, rng.integers(0, 5, (8, 1)), rng.standard_normal((8, 4))).data
    assert np.all(np.abs(nodes) <= 3.0)


@pytest.mark.parametrize("env_id,phys", [("cartpole", True), ("highway_v0", True), ("highway_v0", False)])
def test_world_model_heads_gradcheck(env_id, phys):
    m = get_manifest(env_id)
    rng = np.random.default_rng(0)
    wm = WorldModel(m, physics_template(m, phys), hidden=16, rng=rng)
    spec = sample_task_specs(env_id, 1, rng)[0]
    tr = collect_episodes([make_env(spec, 0)], ExplorationPolicy(m), None, rng, max_steps=6)[0]
    z = rng.standard_normal((len(tr), 4))

    def loss():
        t = transition_error_t(m, wm.transition_t(tr.obs, tr.actions, z), tr.next_obs).mean()
        return t + ((wm.reward_t(tr.obs, tr.actions, z) - tr.rewards * m.reward_scale) ** 2).mean()

    assert finite_diff_check(loss, wm.store, max_coords=6) < 1e-4


def test_imagination_clips_tags_and_stops_at_terminal():
    m = get_manifest("cartpole")
    wm = WorldModel(m, rng=np.random.default_rng(0))
    for net, _ in wm.node_nets:
        net.layers[-1][1].data = net.layers[-1][1].data + np.array([0.0, 25.0])
    rng = np.random.default_rng(0)
    trajs = imagine_rollouts(wm, ExplorationPolicy(m), rng.standard_normal((3, 4)), np.zeros((3, 4)), 100, rng,
                             ["IR", "I", "I"])
    assert [t.tag for t in trajs] == ["IR", "I", "I"]
    for t in trajs:
        assert t.terminals[-1] and not t.terminals[:-1].any() and len(t) < 100
        assert np.all(t.next_obs <= np.array(m.obs_high)) and np.all(t.next_obs >= np.array(m.obs_low))


def test_imagination_raises_on_non_finite():
    m = get_manifest("nav2d")
    wm = WorldModel(m, rng=np.random.default_rng(0))
    wm.reward_net.layers[-1][1].data = np.array([np.nan])
    with pytest.raises(ImaginationError):
        imagine_rollout(wm, ExplorationPolicy(m), np.zeros(4), None, 5, np.random.default_rng(0))


def test_shape_errors():
    m = get_manifest("nav2d")
    wm = WorldModel(m, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        wm.predict_reward(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        wm.predict_reward(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        imagine_rollout(wm, ExplorationPolicy(m), np.zeros(4), None, 0, np.random.default_rng(0))
