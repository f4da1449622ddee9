import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohort.nn import (
    Actor,
    AdamState,
    Checkpoint,
    Critic,
    MaskedCategorical,
    Mlp,
    SquashedGaussian,
    adam_step,
    backward,
    bounded_gaussian,
    forward,
    squash,
    unsquash,
)


def loop_forward(params, x):
    """Scalar-loop reference for a tanh MLP with a linear output layer."""
    h = list(x)
    n_layers = len(params) // 2
    for k in range(n_layers):
        W, b = params[2 * k], params[2 * k + 1]
        z = [b[j] + sum(h[i] * W[i][j] for i in range(len(h))) for j in range(len(b))]
        h = [math.tanh(v) for v in z] if k < n_layers - 1 else z
    return h


def test_forward_matches_loop_oracle(rng):
    net = Mlp([4, 5, 3, 2], rng=rng)
    x = rng.normal(size=4)
    out, _ = forward(net, x)
    np.testing.assert_allclose(out, loop_forward([p.tolist() for p in net.params], x.tolist()), rtol=1e-12)


def test_identity_network():
    net = Mlp([3, 3], params=[np.eye(3), np.zeros(3)])
    x = np.array([0.5, -2.0, 7.0])
    np.testing.assert_array_equal(net.forward(x)[0], x)


def test_zero_weights_give_uniform_policy():
    actor = Actor(10, 3, hidden=(8,))
    for p in actor.net.params:
        p[...] = 0.0
    heads, _ = actor.forward(np.ones(10))
    probs = MaskedCategorical(heads["mode"]).probs
    np.testing.assert_allclose(probs, np.full_like(probs, 1.0 / probs.shape[1]))


def test_batch_and_single_agree(rng):
    net = Mlp([3, 4, 2], rng=rng)
    X = rng.normal(size=(5, 3))
    batch, _ = net.forward(X)
    for i in range(5):
        np.testing.assert_allclose(net.forward(X[i])[0], batch[i])


def test_wrong_input_width():
    with pytest.raises(ValueError):
        Mlp([3, 2]).forward(np.zeros(4))


def test_gradient_matches_finite_differences(rng):
    net = Mlp([3, 6, 5, 2], rng=rng)
    X = rng.normal(size=(4, 3))
    G = rng.normal(size=(4, 2))

    def loss():
        return float((forward(net, X)[0] * G).sum())

    _, cache = forward(net, X)
    grads = backward(net, cache, G)
    eps = 1e-6
    for p, g in zip(net.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + eps
            up = loss()
            flat[idx] = old - eps
            down = loss()
            flat[idx] = old
            assert (up - down) / (2 * eps) == pytest.approx(gflat[idx], rel=1e-5, abs=1e-7)


def test_zero_upstream_gradient(rng):
    net = Mlp([3, 4, 2], rng=rng)
    _, cache = net.forward(rng.normal(size=(2, 3)))
    for g in net.backward(cache, np.zeros((2, 2))):
        assert not g.any()


def test_stale_cache_rejected(rng):
    net = Mlp([3, 4, 2], rng=rng)
    _, cache = net.forward(np.zeros(3))
    net.version += 1
    with pytest.raises(ValueError, match="stale"):
        net.backward(cache, np.ones(2))
    other = net.copy()
    _, cache = net.forward(np.zeros(3))
    with pytest.raises(ValueError):
        other.backward(cache, np.ones(2))


def test_masked_categorical_examples():
    d = MaskedCategorical([0.0, 0.0, 5.0], [True, True, False])
    np.testing.assert_allclose(d.probs[0], [0.5, 0.5, 0.0])
    d = MaskedCategorical([math.log(2.0), 0.0])
    np.testing.assert_allclose(d.probs[0], [2 / 3, 1 / 3])
    d = MaskedCategorical([1.0, 2.0, 3.0], [False, True, False])
    assert d.entropy()[0] == pytest.approx(0.0)
    assert d.mode()[0] == 1


def test_masked_action_log_prob_errors():
    d = MaskedCategorical([0.0, 0.0], [True, False])
    with pytest.raises(ValueError):
        d.log_prob([1])
    with pytest.raises(ValueError):
        MaskedCategorical([0.0, 0.0], [False, False])


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.data())
def test_masked_categorical_properties(logits, data):
    mask = data.draw(st.lists(st.booleans(), min_size=len(logits), max_size=len(logits)).filter(any))
    d = MaskedCategorical(logits, mask)
    p = d.probs[0]
    assert p.sum() == pytest.approx(1.0)
    assert (p[~np.array(mask)] == 0.0).all()
    assert 0.0 <= d.entropy()[0] <= math.log(sum(mask)) + 1e-9


def test_categorical_gradients_by_finite_difference(rng):
    logits = rng.normal(size=(1, 4))
    mask = np.array([[True, False, True, True]])
    a = 2
    g = MaskedCategorical(logits, mask).grad_log_prob([a])[0]
    ge = MaskedCategorical(logits, mask).grad_entropy()[0]
    eps = 1e-6
    for k in range(4):
        up, down = logits.copy(), logits.copy()
        up[0, k] += eps
        down[0, k] -= eps
        dl = (MaskedCategorical(up, mask).log_prob([a])[0] - MaskedCategorical(down, mask).log_prob([a])[0]) / (2 * eps)
        dh = (MaskedCategorical(up, mask).entropy()[0] - MaskedCategorical(down, mask).entropy()[0]) / (2 * eps)
        assert g[k] == pytest.approx(dl, abs=1e-7)
        assert ge[k] == pytest.approx(dh, abs=1e-7)
    assert g[1] == 0.0 and ge[1] == 0.0


@pytest.mark.parametrize("mean,log_sd", [(0.0, -0.5), (1.2, 0.0), (-0.7, -1.5)])
def test_squashed_density_integrates_to_one(mean, log_sd):
    d = SquashedGaussian(np.array(mean), log_sd)
    # integrate in pre-squash space: p_bid(b) db = p_bid(squash(u)) |db/du| du
    u = np.linspace(mean - 12 * math.exp(log_sd), mean + 12 * math.exp(log_sd), 200_001)
    b = squash(u)
    dens = np.exp(d.log_prob(u))
    assert np.trapezoid(dens, b) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(d.log_prob_bid(b[1000:-1000:5000]), d.log_prob(u[1000:-1000:5000]), rtol=1e-5)


def test_bounded_gaussian_samples_in_bounds():
    bids, logp = bounded_gaussian(np.full(100_000, 3.0), 1.0, rng=np.random.default_rng(0))
    assert bids.min() >= 0.0 and bids.max() <= 400.0
    assert np.isfinite(logp).all()


def test_squash_roundtrip():
    u = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(unsquash(squash(u)), u, atol=1e-9)
    assert squash(np.array(0.0)) == pytest.approx(200.0)


def test_squashed_gaussian_rejects_bad_inputs():
    with pytest.raises(ValueError):
        SquashedGaussian(np.array(np.nan), 0.0)
    with pytest.raises(ValueError):
        SquashedGaussian(np.array(0.0), 0.0, 5.0, 5.0)


@settings(max_examples=30)
@given(st.floats(-3, 3), st.floats(-2, 1), st.floats(-4, 4))
def test_gaussian_grad_log_prob(mean, log_sd, u):
    d = SquashedGaussian(np.array(mean), log_sd)
    gm, gs = d.grad_log_prob(u)
    eps = 1e-6
    fm = (SquashedGaussian(np.array(mean + eps), log_sd).log_prob(u) - SquashedGaussian(np.array(mean - eps), log_sd).log_prob(u)) / (2 * eps)
    fs = (SquashedGaussian(np.array(mean), log_sd + eps).log_prob(u) - SquashedGaussian(np.array(mean), log_sd - eps).log_prob(u)) / (2 * eps)
    assert gm == pytest.approx(fm, rel=1e-4, abs=1e-5)
    assert gs == pytest.approx(fs, rel=1e-4, abs=1e-5)


def test_adam_first_step_is_signed_lr():
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.3, -40.0, 1e-3])]
    st_ = AdamState.for_params(p, lr=0.01)
    adam_step(p, g, st_)
    np.testing.assert_allclose(p[0], [1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], atol=1e-6)


def test_adam_zero_lr_and_zero_grad():
    p = [np.array([1.0, 2.0])]
    adam_step(p, [np.array([5.0, -5.0])], AdamState.for_params(p, lr=0.0))
    np.testing.assert_array_equal(p[0], [1.0, 2.0])
    adam_step(p, [np.zeros(2)], AdamState.for_params(p, lr=0.1))
    np.testing.assert_array_equal(p[0], [1.0, 2.0])


def test_adam_skips_non_finite():
    p = [np.array([1.0])]
    s = AdamState.for_params(p, lr=0.1)
    adam_step(p, [np.array([np.inf])], s)
    assert p[0][0] == 1.0 and s.t == 0
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(2)], s)


def test_adam_minimizes_quadratic():
    p = [np.array([5.0, -3.0])]
    s = AdamState.for_params(p, lr=0.05)
    for _ in range(2000):
        adam_step(p, [2.0 * p[0]], s)
    np.testing.assert_allclose(p[0], 0.0, atol=1e-2)


def test_actor_heads_and_backward(rng):
    actor = Actor(12, 3, hidden=(8, 8), rng=rng)
    heads, cache = actor.forward(rng.normal(size=(5, 12)))
    assert heads["mode"].shape == (5, 3) and heads["target"].shape == (5, 3)
    assert heads["capacity"].shape == (5, 3) and heads["bid"].shape == (5,)
    grads = actor.backward(cache, {"bid": np.ones(5)}, d_log_sd=0.5)
    assert len(grads) == len(actor.params)
    assert grads[-1][0] == 0.5
    bids = actor.greedy_bids(rng.normal(size=(5, 12)))
    assert ((bids >= 0) & (bids <= 400)).all()


def test_checkpoint_roundtrip(tmp_path, rng):
    actor = Actor(12, 3, hidden=(8,), rng=rng, log_sd=-0.8)
    critic = Critic(20, hidden=(6,), rng=rng)
    path = tmp_path / "ck.json"
    Checkpoint(actor, critic, {"phase": "A"}).save(path)
    ck = Checkpoint.load(path)
    x = rng.normal(size=(4, 12))
    s = rng.normal(size=(4, 20))
    for k in ("mode", "target", "capacity", "bid"):
        np.testing.assert_array_equal(ck.actor.forward(x)[0][k], actor.forward(x)[0][k])
    np.testing.assert_array_equal(ck.critic.value(s), critic.value(s))
    assert ck.actor.log_sd[0] == -0.8 and ck.meta == {"phase": "A"}


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        Checkpoint.load(p)
    p.write_text('{"format": "cohort-checkpoint", "version": 99}')
    with pytest.raises(ValueError, match="version"):
        Checkpoint.load(p)
