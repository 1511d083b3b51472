from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import gaussian_kl_direct

from metaimagine.envlib import TaskSpec, get_manifest, make_env
from metaimagine.inference import (
    GruEncoder,
    LatentPosterior,
    PogEncoder,
    encode,
    encode_pog,
    kl_tensor,
    kl_to_prior,
    make_encoder,
    product_of_gaussians,
    reparameterize,
    sample_latent,
)
from metaimagine.nncore import ParameterStore, ad, backward
from metaimagine.rollout import ExplorationPolicy, collect_episodes

NAV = get_manifest("nav2d")


def nav_trajs(n=3, seed=0):
    rng = np.random.default_rng(seed)
    envs = [make_env(TaskSpec("nav2d", {"goal_x": 0.5 * i - 1, "goal_y": 1.0}), i) for i in range(n)]
    return collect_episodes(envs, ExplorationPolicy(NAV), None, rng, max_steps=20)


def test_kl_frozen_value():
    post = LatentPosterior([0.5, -1.0], [0.8, 1.5])
    # 0.5*(0.64+0.25-1) - ln 0.8 + 0.5*(2.25+1-1) - ln 1.5
    assert kl_to_prior(post) == pytest.approx(0.88767844, abs=1e-8)


@given(arrays(np.float64, 4, elements=st.floats(-3, 3)), arrays(np.float64, 4, elements=st.floats(0.05, 3)))
def test_kl_matches_direct_formula_and_is_nonnegative(mu, sd):
    post = LatentPosterior(mu, sd)
    kl = kl_to_prior(post)
    assert kl == pytest.approx(gaussian_kl_direct(mu, sd), rel=1e-12, abs=1e-12)
    assert kl >= -1e-12
    np.testing.assert_allclose(kl_tensor(ad.as_tensor(mu[None]), ad.as_tensor(sd[None])).data, [kl], rtol=1e-12)


def test_kl_zero_iff_prior():
    assert kl_to_prior(LatentPosterior.prior(4)) == 0.0
    assert kl_to_prior(LatentPosterior(np.zeros(4) + 1e-3, np.ones(4))) > 0.0


def test_kl_monte_carlo_agreement():
    rng = np.random.default_rng(0)
    mu, sd = np.array([0.3, -0.7, 1.1, 0.0]), np.array([0.5, 1.2, 0.9, 0.3])
    z = mu + sd * rng.standard_normal((400_000, 4))
    logq = np.sum(-0.5 * ((z - mu) / sd) ** 2 - np.log(sd), axis=1)
    logp = np.sum(-0.5 * z**2, axis=1)
    mc = float(np.mean(logq - logp))
    assert mc == pytest.approx(kl_to_prior(LatentPosterior(mu, sd)), rel=0.01)


def test_posterior_rejects_nonpositive_std():
    with pytest.raises(ValueError):
        LatentPosterior([0.0], [0.0])


def test_reparameterized_sample_gradients():
    store = ParameterStore("r")
    m, s = store.add("m", np.array([0.5, -0.2])), store.add("s", np.array([1.0, 2.0]))
    eps = np.array([0.3, -1.5])
    backward(reparameterize(m, s, eps).sum())
    np.testing.assert_allclose(m.grad, [1.0, 1.0])
    np.testing.assert_allclose(s.grad, eps)
    draws = np.stack([sample_latent(LatentPosterior([1.0], [0.1]), np.random.default_rng(i)) for i in range(500)])
    assert abs(draws.mean() - 1.0) < 0.02


def test_product_of_gaussians_oracle():
    post = product_of_gaussians(np.array([[0.0], [2.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_allclose(post.mean, [1.0])
    np.testing.assert_allclose(post.std, [np.sqrt(0.5)])


def test_empty_context_returns_prior():
    enc = GruEncoder(NAV, rng=np.random.default_rng(0))
    out = encode(enc, [])
    assert len(out) == 1 and np.array_equal(out[0].mean, np.zeros(4)) and np.array_equal(out[0].std, np.ones(4))
    with pytest.raises(ValueError):
        encode_pog(PogEncoder(NAV), [])


def test_gru_prefix_posteriors_and_final_agree():
    enc = GruEncoder(NAV, rng=np.random.default_rng(0))
    tr = nav_trajs(1)[0]
    steps = enc.encode(tr.tuples())
    assert len(steps) == len(tr)
    final = enc.final_posteriors([tr])
    np.testing.assert_allclose(final.mean[0], steps[-1].mean, atol=1e-12)


def test_masked_batching_matches_individual_encoding():
    enc = GruEncoder(NAV, rng=np.random.default_rng(1))
    trajs = nav_trajs(3)
    trajs[1] = trajs[1].slice(0, 7)
    batched = enc.final_posteriors(trajs)
    for i, tr in enumerate(trajs):
        single = enc.final_posteriors([tr])
        np.testing.assert_allclose(batched.mean[i], single.mean[0], atol=1e-12)
        np.testing.assert_allclose(batched.std[i], single.std[0], atol=1e-12)


def test_gru_is_order_sensitive_pog_is_not():
    tr = nav_trajs(1)[0]
    tuples = tr.tuples()
    gru = GruEncoder(NAV, rng=np.random.default_rng(2))
    pog = PogEncoder(NAV, rng=np.random.default_rng(2))
    assert not np.allclose(gru.encode(tuples)[-1].mean, gru.encode(tuples[::-1])[-1].mean)
    np.testing.assert_allclose(encode_pog(pog, tuples).mean, encode_pog(pog, tuples[::-1]).mean, atol=1e-12)


def test_window_keeps_last_transitions():
    enc = GruEncoder(NAV, rng=np.random.default_rng(3))
    tr = nav_trajs(1)[0]
    np.testing.assert_allclose(enc.posterior_means([tr], window=5),
                               enc.posterior_means([tr.slice(len(tr) - 5, len(tr))]), atol=1e-12)


def test_make_encoder_kinds():
    assert make_encoder("gru", NAV).kind == "gru"
    assert make_encoder("mlp", NAV).kind == "pog"
    with pytest.raises(ValueError):
        make_encoder("transformer", NAV)
