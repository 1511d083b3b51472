"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are repeated in the "acceptance criteria" section of the pytest
terminal summary.  Training budgets are sized for a single CPU core.
"""
from __future__ import annotations

import time

import numpy as np
import pytest
from conftest import record_criterion
from oracles import cartpole_reward_direct, cluster_losses_bruteforce, idm_direct, nav2d_reward_direct

from metaimagine.envlib import (
    IdmParams,
    TaskSpec,
    cartpole_reward,
    get_manifest,
    idm_acceleration,
    make_env,
    nav2d_reward,
    sample_task_specs,
)
from metaimagine.evalkit import PLOT_KINDS, emit_plots
from metaimagine.imagination import interpolate_factor, interpolate_pair
from metaimagine.inference import GruEncoder, LatentPosterior, kl_to_prior, stack_features
from metaimagine.metatrain import (
    TrainConfig,
    build_components,
    cluster_losses,
    elbo_objective,
    evaluate_run,
    make_test_tasks,
    make_train_tasks,
    meta_test_adapt,
    meta_train,
    sample_contexts,
    train_worldmodel,
)
from metaimagine.nncore import Mlp, MlpSpec, ParameterStore, ad, finite_diff_check
from metaimagine.policy import Batch, ReplayBuffer, SacAgent, SacConfig
from metaimagine.rollout import ExplorationPolicy, collect_episodes
from metaimagine.worldmodel import WorldModel, physics_template, transition_error_t

SEEDS = (0, 1, 2)

# encoder/world-model budget for nav2d (criteria 4 and 5): about 3e5 real env steps per seed
NAV_WM = dict(env_id="nav2d", n_tasks=8, iterations=400, ed_steps=25, episodes_per_iter=1, ed_warmup_steps=0)
# equal budgets for the highway physics ablation (criterion 6)
HIGHWAY_WM = dict(env_id="highway_v0", n_tasks=8, iterations=30, ed_steps=25, episodes_per_iter=1,
                  ed_warmup_steps=0)
# full meta-training for the imagination benefit check (criterion 7)
NAV_META = dict(env_id="nav2d", n_tasks=4, iterations=80, explore_episodes=5, episodes_per_iter=1,
                ed_warmup_steps=400, ed_steps=20, policy_steps=200, probe_every=5, probe_vectors=40,
                n_imaginary=4, eval_tasks=0, checkpoint_every=0)


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


# -- 1: gradients ------------------------------------------------------------------
def _gradient_suite() -> dict:
    rng = np.random.default_rng(0)
    errs = {}
    store = ParameterStore("mlp")
    net = Mlp(store, "f", MlpSpec((3, 16, 16, 2), "relu"), rng)
    x = rng.standard_normal((6, 3))
    errs["mlp"] = finite_diff_check(lambda: ad.square(net(x)).sum(), store)

    nav = get_manifest("nav2d")
    enc = GruEncoder(nav, hidden=8, rng=rng)
    spec = sample_task_specs("nav2d", 1, rng)[0]
    tr = collect_episodes([make_env(spec, 0)], ExplorationPolicy(nav), None, rng, max_steps=6)[0]
    feats, mask = stack_features(nav, [tr])

    def gru_loss():
        mean, std = enc.posterior_tensors(feats, mask)
        return (ad.square(mean) + std).sum()

    errs["gru_encoder_head"] = finite_diff_check(gru_loss, enc.store)

    for env_id in ("nav2d", "cartpole", "highway_v0"):
        m = get_manifest(env_id)
        wm = WorldModel(m, physics_template(m, True), 4, hidden=16, rng=rng)
        sp = sample_task_specs(env_id, 1, rng)[0]
        t = collect_episodes([make_env(sp, 1)], ExplorationPolicy(m), None, rng, max_steps=6)[0]
        z = rng.standard_normal((len(t), 4))

        def wm_loss(wm=wm, t=t, z=z, m=m):
            e = transition_error_t(m, wm.transition_t(t.obs, t.actions, z), t.next_obs).mean()
            return e + ad.square(wm.reward_t(t.obs, t.actions, z) - t.rewards * m.reward_scale).mean()

        errs[f"worldmodel_heads[{env_id}]"] = finite_diff_check(wm_loss, wm.store, max_coords=8)

    for env_id, kind in (("nav2d", "continuous"), ("highway_v0", "discrete")):
        m = get_manifest(env_id)
        agent = SacAgent(m, 4, SacConfig(hidden=16), rng)
        n = 6
        obs = rng.uniform(-0.5, 0.5, (n, m.obs_dim)) * np.array(m.obs_high)
        acts = (rng.integers(0, m.action_dim, (n, 1)).astype(float) if m.discrete
                else rng.uniform(-0.9, 0.9, (n, m.action_dim)))
        b = Batch(obs, acts, rng.standard_normal(n), obs * 0.9, np.zeros(n, dtype=bool),
                  np.array(["R"] * n, dtype=object), np.zeros(n, dtype=object), np.zeros((n, 4)))
        zb = rng.standard_normal((n, 4))
        y = agent.target_values(b, zb, rng)
        eps = rng.standard_normal((n, m.action_dim))
        errs[f"critic_loss[{kind}]"] = finite_diff_check(lambda: agent.critic_loss(b, zb, rng, target=y),
                                                         agent.critic)
        errs[f"actor_loss[{kind}]"] = finite_diff_check(lambda: agent.actor_loss(b, zb, rng, eps=eps),
                                                        agent.actor)

    for env_id in ("nav2d", "cartpole", "highway_v0"):
        cfg = TrainConfig(env_id=env_id, n_tasks=4, encoder_hidden=6, wm_hidden=8)
        manifest, encoder, wm, _ = build_components(cfg, rng)
        buf = ReplayBuffer.for_manifest(manifest, 4)
        for i, task in enumerate(make_train_tasks(cfg, rng)):
            buf.add_trajectory(collect_episodes([make_env(task, i)], ExplorationPolicy(manifest), None, rng,
                                                max_steps=5)[0], i)
        batch = sample_contexts(buf, list(range(4)), 1, 4, rng, recent_only=False)
        e = rng.standard_normal((len(batch), 4))
        errs[f"full_objective[{env_id}]"] = finite_diff_check(
            lambda: elbo_objective(wm, encoder, batch, cfg, e)[0], [encoder.store, wm.store], max_coords=4)
    return errs


def test_criterion_1_gradient_suite():
    errs, secs = _timed(_gradient_suite)
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and secs < 120
    record_criterion(1, ok, f"{len(errs)} gradchecks, worst {worst}={errs[worst]:.2e} (<1e-4), {secs:.1f}s (<120s)")
    assert ok, errs


# -- 2: closed-form oracles --------------------------------------------------------
def _closed_form() -> tuple[float, float, bool]:
    rng = np.random.default_rng(7)
    mu, sd = np.array([0.4, -1.2, 0.0, 2.0]), np.array([0.3, 1.5, 0.8, 0.6])
    z = mu + sd * rng.standard_normal((1_000_000, 4))
    mc = float(np.mean(np.sum(-0.5 * ((z - mu) / sd) ** 2 - np.log(sd) + 0.5 * z**2, axis=1)))
    kl = kl_to_prior(LatentPosterior(mu, sd))
    kl_rel = abs(mc - kl) / kl

    worst_cluster = 0.0
    for trial in range(50):
        groups = [rng.standard_normal((int(rng.integers(1, 6)), 4)) * rng.uniform(0.1, 3)
                  for _ in range(int(rng.integers(1, 7)))]
        sigma = float(rng.uniform(0.5, 4.0))
        intra, inter = cluster_losses(groups, sigma)
        b_intra, b_inter = cluster_losses_bruteforce(groups, sigma)
        worst_cluster = max(worst_cluster, abs(float(intra.data) - b_intra), abs(float(inter.data) - b_inter))

    endpoints = True
    for _ in range(1000):
        z_prev, z_next = rng.standard_normal(4) * 3, rng.standard_normal(4) * 3
        endpoints &= np.array_equal(interpolate_pair(z_prev, z_next, 1.0), z_prev)
        endpoints &= np.array_equal(interpolate_pair(z_prev, z_next, 0.0), z_next)
    for d in (1, 2, 4, 7):
        anchors = np.sort(rng.uniform(-3, 3, 4))
        vals = interpolate_factor(anchors, d, 0.0, None)
        endpoints &= all(a in vals for a in anchors)
    return kl_rel, worst_cluster, bool(endpoints)


def test_criterion_2_closed_form_oracles():
    (kl_rel, cluster_err, endpoints), secs = _timed(_closed_form)
    ok = kl_rel < 0.01 and cluster_err <= 1e-10 and endpoints and secs < 60
    record_criterion(2, ok, f"KL vs MC(1e6) rel {kl_rel:.2e} (<1%), cluster vs brute force {cluster_err:.1e} "
                            f"(<=1e-10), endpoints exact={endpoints}, {secs:.1f}s (<60s)")
    assert ok


# -- 3: environment oracles --------------------------------------------------------
def _env_oracles() -> dict:
    rng = np.random.default_rng(3)
    out = {}
    checked, rear_ok = 0, True
    for p in (-1.0, -0.5, 0.0, 0.3, 1.0):
        env = make_env(TaskSpec("highway_v0", {"traffic_speed": 24.0, "p": p}), 5)
        s = env.reset()
        for a in [3, 3, 3, 4, 4, 0, 3, 4, 4, 4, 3, 3] * 5:
            if s.done:
                break
            s, _ = env.step(a)
            if s.info["rear_index"] is not None and not s.info["merged"]:
                rear_ok &= s.info["rear_accel"] == p * s.info["ego_accel"]
                checked += 1
    out["rear_accel_exact"] = rear_ok and checked > 20

    idm_ok = True
    for _ in range(2000):
        v, vl, gap, v0 = rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(0.5, 200), rng.uniform(20, 30)
        idm_ok &= abs(idm_acceleration(v, v - vl, gap, IdmParams(desired_speed=v0)) - idm_direct(v, vl, gap, v0)) \
            <= 1e-12 * max(1.0, abs(idm_direct(v, vl, gap, v0)))
    out["idm_exact"] = idm_ok

    nav_ok = all(nav2d_reward([x, y], [gx, gy]) == nav2d_reward_direct(x, y, gx, gy)
                 for x, y, gx, gy in rng.uniform(-4, 4, (2000, 4)))
    cp_ok = all(abs(cartpole_reward(s) - cartpole_reward_direct(*s)) <= 1e-15
                for s in rng.uniform(-3, 3, (2000, 4)))
    out["nav2d_reward_exact"], out["cartpole_reward_exact"] = nav_ok, cp_ok

    logs = []
    for _ in range(2):
        row = []
        for env_id in ("nav2d", "cartpole", "highway_v0"):
            m = get_manifest(env_id)
            specs = sample_task_specs(env_id, 3, 11)
            r = np.random.default_rng(9)
            trajs = collect_episodes([make_env(s, i) for i, s in enumerate(specs)], ExplorationPolicy(m), None, r)
            row.append(b"".join(t.obs.tobytes() + t.rewards.tobytes() + t.actions.tobytes() for t in trajs))
        logs.append(b"".join(row))
    out["bitwise_determinism"] = logs[0] == logs[1]
    return out


def test_criterion_3_environment_oracles():
    res, secs = _timed(_env_oracles)
    ok = all(res.values()) and secs < 60
    record_criterion(3, ok, ", ".join(f"{k}={v}" for k, v in res.items()) + f", {secs:.1f}s (<60s)")
    assert ok


# -- 4/5: nav2d encoder and world model ----------------------------------------------
@pytest.fixture(scope="module")
def nav_runs(tmp_path_factory):
    """beta=5 and beta=1 runs under the same budget; the beta=5 runs also serve criterion 4."""
    root = tmp_path_factory.mktemp("nav_wm")
    out = {}
    for beta in (5.0, 1.0):
        reports, secs = [], 0.0
        for seed in SEEDS:
            cfg = TrainConfig(**NAV_WM, beta=beta, seed=seed, out_dir=str(root / f"beta{beta:g}_s{seed}"))
            t = time.perf_counter()
            art = train_worldmodel(cfg)
            sections = ("disentanglement", "intra", "recon", "sfi", "sci") if beta == 5.0 else ("disentanglement",)
            reports.append(evaluate_run(art, seed=seed, probe_vectors=200, sections=sections))
            secs += time.perf_counter() - t
        out[beta] = (reports, secs)
    return out


def test_criterion_4_nav2d_representation(nav_runs):
    reports, secs = nav_runs[5.0]
    dis = np.array([r.disentanglement_score.mean for r in reports])
    intra = np.array([r.intra_cluster_variance.mean for r in reports])
    recon = np.array([r.reconstruction_error.mean for r in reports])
    sfi = np.array([max(s.mean for s in r.sfi_error.values()) for r in reports])
    sci = np.array([r.sci_error.mean for r in reports])
    checks = {
        "disentanglement": (dis.mean(), dis.mean() >= 85.0, ">=85"),
        "intra": (intra.mean(), intra.mean() <= 0.5, "<=0.5"),
        "recon": (recon.mean(), recon.mean() <= 0.3, "<=0.3"),
        "sfi(worst factor)": (sfi.mean(), sfi.mean() <= 0.3, "<=0.3"),
        "sci": (sci.mean(), sci.mean() <= 0.7, "<=0.7"),
    }
    ok = all(c[1] for c in checks.values()) and secs <= 30 * 60
    detail = ", ".join(f"{k} {v:.3f} ({rule})" for k, (v, _, rule) in checks.items())
    record_criterion(4, ok, f"mean over seeds {list(SEEDS)}: {detail}; per-seed disentanglement "
                            f"{np.round(dis, 2).tolist()}; {secs / 60:.1f} min (<=30)")
    assert ok


def test_criterion_5_beta_ablation(nav_runs):
    hi = np.array([r.disentanglement_score.mean for r in nav_runs[5.0][0]])
    lo = np.array([r.disentanglement_score.mean for r in nav_runs[1.0][0]])
    gap = hi.mean() - lo.mean()
    ok = gap >= 20.0
    record_criterion(5, ok, f"beta=5 {hi.mean():.2f} vs beta=1 {lo.mean():.2f}, gap {gap:.2f} (>=20) "
                            f"over seeds {list(SEEDS)}")
    assert ok


# -- 6: physics ablation ------------------------------------------------------------------
def test_criterion_6_physics_ablation(tmp_path):
    recon = {}
    for physics in (True, False):
        vals = []
        for seed in SEEDS:
            cfg = TrainConfig(**HIGHWAY_WM, physics=physics, seed=seed, out_dir=str(tmp_path / f"{physics}_{seed}"))
            art = train_worldmodel(cfg)
            vals.append(evaluate_run(art, seed=seed, sections=("recon",)).reconstruction_error.mean)
        recon[physics] = np.array(vals)
    ratio = recon[False].mean() / recon[True].mean()
    ok = ratio >= 2.0
    record_criterion(6, ok, f"held-out recon physics {recon[True].mean():.3f} {np.round(recon[True], 3).tolist()} "
                            f"vs none {recon[False].mean():.3f} {np.round(recon[False], 3).tolist()}, "
                            f"ratio {ratio:.2f} (>=2)")
    assert ok


# -- 7: imagination benefit ------------------------------------------------------------------
def test_criterion_7_imagination_benefit(tmp_path):
    t0 = time.perf_counter()
    returns = {}
    for label, flags in (("R4I4", dict(enable_ir=True, enable_i=True)),
                         ("R4", dict(enable_ir=False, enable_i=False))):
        per_seed = []
        for seed in SEEDS:
            cfg = TrainConfig(**NAV_META, **flags, seed=seed, out_dir=str(tmp_path / f"{label}_{seed}"))
            art = meta_train(cfg)
            specs = make_test_tasks(art.tasks, 8, seed=100 + seed)
            per_seed.append(meta_test_adapt(art, specs, cfg.context_budget, seeds=(seed,)).mean)
        returns[label] = np.array(per_seed)
    secs = time.perf_counter() - t0
    ok = returns["R4I4"].mean() >= returns["R4"].mean() and secs <= 2 * 3600
    record_criterion(7, ok, f"post-adaptation return R4I4 {returns['R4I4'].mean():.2f} "
                            f"{np.round(returns['R4I4'], 2).tolist()} vs R4 {returns['R4'].mean():.2f} "
                            f"{np.round(returns['R4'], 2).tolist()}; {secs / 60:.1f} min (<=120)")
    assert ok


# -- 8: pipeline smoke ------------------------------------------------------------------------
def test_criterion_8_pipeline_smoke(tmp_path):
    t0 = time.perf_counter()
    missing = []
    for env_id in ("nav2d", "cartpole", "highway_v0"):
        cfg = TrainConfig(env_id=env_id, iterations=1, explore_episodes=1, ed_warmup_steps=5, ed_steps=5,
                          policy_steps=5, probe_vectors=10, probe_pairs=2, probe_every=1, probe_threshold=0.0,
                          eval_tasks=2, eval_every=1, checkpoint_every=1, out_dir=str(tmp_path / env_id))
        art = meta_train(cfg)
        for p in (art.checkpoint, art.metrics_csv, art.imaginary_manifest):
            if not p.exists():
                missing.append(str(p))
        for kind in PLOT_KINDS:
            for path in emit_plots(art.out_dir, kind):
                if not path.exists():
                    missing.append(str(path))
        plots = sorted(q.name for q in (art.out_dir / "plots").glob("*.png"))
        if len(plots) != 3:
            missing.append(f"{env_id}: plots {plots}")
    secs = time.perf_counter() - t0
    ok = not missing and secs < 600
    record_criterion(8, ok, f"3 envs x (checkpoint, metrics CSV, imaginary manifest, {len(PLOT_KINDS)} plot kinds); "
                            f"missing {missing or 'none'}; {secs:.1f}s (<600s)")
    assert ok
