import numpy as np
import pytest

from ehmarl.nets import (ACTOR_DIMS, CRITIC_DIMS, POLICY_SPLIT, AdamOptimizer,
                         MlpModel, actor_loss_and_grads, apply_gradients,
                         clip_global_norm, critic_loss_and_grads, forward_policy,
                         forward_value, greedy_index, load_model, make_optimizer,
                         masked_softmax, n_step_returns, new_actor, new_critic,
                         sample_masked, save_model, split_logits)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def numeric_grads(model, loss_fn, step=1e-5):
    """Central finite differences of loss_fn() w.r.t. every parameter."""
    grads = []
    for W, b in zip(model.W, model.b):
        gW = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            orig = W[idx]
            W[idx] = orig + step
            up = loss_fn()
            W[idx] = orig - step
            down = loss_fn()
            W[idx] = orig
            gW[idx] = (up - down) / (2 * step)
        gb = np.zeros_like(b)
        for idx in np.ndindex(b.shape):
            orig = b[idx]
            b[idx] = orig + step
            up = loss_fn()
            b[idx] = orig - step
            down = loss_fn()
            b[idx] = orig
            gb[idx] = (up - down) / (2 * step)
        grads.append((gW, gb))
    return grads


def max_rel_err(analytic, numeric):
    worst = 0.0
    for (aW, ab), (nW, nb) in zip(analytic, numeric):
        for a, n in ((aW, nW), (ab, nb)):
            denom = np.maximum(np.abs(n), 1e-6)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def toy_actor(seed, in_dim=5, hidden=8):
    return MlpModel.create((in_dim, hidden), "policy", seed=seed)


def toy_critic(seed, in_dim=5, hidden=8):
    return MlpModel.create((in_dim, hidden, 1), "value", seed=seed)


def random_batch(rng, in_dim=5, batch=4):
    states = rng.normal(size=(batch, in_dim))
    masks = np.zeros((batch, POLICY_SPLIT[1]), dtype=bool)
    for row in masks:
        row[rng.choice(POLICY_SPLIT[1], size=rng.integers(1, 6), replace=False)] = True
    a_r = np.array([rng.choice(np.flatnonzero(m)) for m in masks])
    a_e = rng.integers(0, POLICY_SPLIT[0], size=batch)
    adv = rng.normal(size=batch)
    return states, masks, a_e, a_r, adv


# ---------------------------------------------------------------------------
# forward / softmax
# ---------------------------------------------------------------------------

def test_zero_weight_policy_is_uniform():
    model = toy_actor(seed=0, in_dim=5)
    for W in model.W:
        W[:] = 0.0
    mask = np.zeros(16, dtype=bool)
    mask[[1, 3, 5, 7, 9]] = True
    p_e, p_r = forward_policy(model, np.ones(5), mask)
    assert np.allclose(p_e, 0.25)
    assert np.allclose(p_r[mask], 0.2)
    assert np.all(p_r[~mask] == 0.0)


def test_single_valid_slot_gets_probability_one():
    model = toy_actor(seed=1)
    mask = np.zeros(16, dtype=bool)
    mask[11] = True
    _, p_r = forward_policy(model, np.random.default_rng(0).normal(size=5), mask)
    assert p_r[11] == 1.0
    assert p_r.sum() == 1.0


def test_policy_distributions_normalize_over_random_draws():
    rng = np.random.default_rng(5)
    model = new_actor(seed=2)
    for _ in range(1000):
        state = rng.normal(size=49)
        mask = np.zeros(16, dtype=bool)
        mask[rng.choice(16, size=rng.integers(1, 16), replace=False)] = True
        p_e, p_r = forward_policy(model, state, mask)
        assert np.all(np.isfinite(p_e)) and np.all(np.isfinite(p_r))
        assert abs(p_e.sum() - 1.0) < 1e-6
        assert abs(p_r.sum() - 1.0) < 1e-6
        assert np.all(p_r[~mask] == 0.0)


def test_all_masked_rejected():
    model = toy_actor(seed=3)
    with pytest.raises(ValueError, match="no valid slot"):
        forward_policy(model, np.zeros(5), np.zeros(16, dtype=bool))


def test_architecture_dims():
    actor = new_actor()
    critic = new_critic()
    assert ACTOR_DIMS == (49, 256, 512, 256, 128)
    assert CRITIC_DIMS == (49, 512, 1024, 256, 1)
    assert actor.W[-1].shape == (128, 20)
    assert critic.W[-1].shape == (256, 1)
    v = forward_value(critic, np.zeros((3, 49)))
    assert v.shape == (3,)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_masked_sampling_never_hits_zero_probability():
    rng = np.random.default_rng(17)
    probs = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
    draws = {sample_masked(probs, rng) for _ in range(2000)}
    assert draws <= {1, 3}


def test_sampling_matches_distribution():
    # Empirical frequencies within 3-sigma multinomial bounds over 1e5 draws.
    rng = np.random.default_rng(23)
    model = new_actor(seed=4)
    state = rng.normal(size=49)
    mask = np.zeros(16, dtype=bool)
    mask[[0, 2, 5, 9]] = True
    _, p_r = forward_policy(model, state, mask)
    n = 100_000
    counts = np.zeros(16)
    for _ in range(n):
        counts[sample_masked(p_r, rng)] += 1
    for j in range(16):
        sigma = np.sqrt(n * p_r[j] * (1 - p_r[j]))
        assert abs(counts[j] - n * p_r[j]) <= 3 * sigma + 1e-9


def test_greedy_tie_break_lowest_index():
    assert greedy_index(np.array([0.4, 0.4, 0.2])) == 0
    assert greedy_index(np.array([0.1, 0.2, 0.3, 0.4])) == 3


# ---------------------------------------------------------------------------
# returns and losses
# ---------------------------------------------------------------------------

def test_n_step_returns_hand_recursion():
    R = n_step_returns([1.0, 1.0, 1.0], bootstrap_value=0.0, gamma=0.9)
    assert np.allclose(R, [2.71, 1.9, 1.0])


def test_n_step_returns_undiscounted():
    R = n_step_returns([2.0, 3.0], bootstrap_value=5.0, gamma=1.0)
    assert np.allclose(R, [10.0, 8.0])


def test_n_step_returns_zero_case_and_errors():
    assert np.all(n_step_returns([0.0, 0.0], 0.0, 0.9) == 0.0)
    with pytest.raises(ValueError):
        n_step_returns([], 0.0, 0.9)
    with pytest.raises(ValueError):
        n_step_returns([1.0], 0.0, 0.0)


def test_critic_loss_value():
    model = toy_critic(seed=6)
    state = np.random.default_rng(1).normal(size=(1, 5))
    v = forward_value(model, state)[0]
    loss, _ = critic_loss_and_grads(model, state, np.array([v + 1.0]))
    assert loss == pytest.approx(0.5)
    loss, grads = critic_loss_and_grads(model, state, np.array([1.0]))
    expected = 0.5 * (1.0 - v) ** 2
    assert loss == pytest.approx(expected)


def test_critic_perfect_fit_zero_gradients():
    model = toy_critic(seed=7)
    states = np.random.default_rng(2).normal(size=(3, 5))
    returns = forward_value(model, states)
    loss, grads = critic_loss_and_grads(model, states, returns)
    assert loss == 0.0
    for gW, gb in grads:
        assert np.all(gW == 0.0) and np.all(gb == 0.0)


def test_actor_loss_value_single_step():
    # log pi = log 0.5 with Ad = 2 gives loss -ln(0.5)*2 ~ 1.3863.
    model = toy_actor(seed=8)
    for W in model.W:
        W[:] = 0.0
    for b in model.b:
        b[:] = 0.0
    mask = np.zeros(16, dtype=bool)
    mask[[4, 8]] = True  # uniform over 2 slots -> p_relay = 0.5
    state = np.ones((1, 5))
    loss, _ = actor_loss_and_grads(model, state, mask[None, :], [0], [4], [2.0],
                                   include_energy_head=False)
    assert loss == pytest.approx(-np.log(0.5) * 2.0, rel=1e-12)


def test_actor_zero_advantage_zero_gradients():
    model = toy_actor(seed=9)
    rng = np.random.default_rng(3)
    states, masks, a_e, a_r, _ = random_batch(rng)
    loss, grads = actor_loss_and_grads(model, states, masks, a_e, a_r,
                                       np.zeros(len(states)))
    assert loss == 0.0
    for gW, gb in grads:
        assert np.all(gW == 0.0) and np.all(gb == 0.0)


def test_actor_rejects_masked_choice():
    model = toy_actor(seed=10)
    mask = np.zeros((1, 16), dtype=bool)
    mask[0, 3] = True
    with pytest.raises(ValueError, match="masked"):
        actor_loss_and_grads(model, np.zeros((1, 5)), mask, [0], [5], [1.0])


def test_critic_gradients_match_finite_differences():
    rng = np.random.default_rng(31)
    worst = 0.0
    for trial in range(20):
        model = toy_critic(seed=100 + trial)
        states = rng.normal(size=(4, 5))
        returns = rng.normal(size=4)
        _, grads = critic_loss_and_grads(model, states, returns)
        num = numeric_grads(model, lambda: critic_loss_and_grads(model, states, returns)[0])
        worst = max(worst, max_rel_err(grads, num))
    assert worst < 1e-4


def test_actor_gradients_match_finite_differences():
    rng = np.random.default_rng(37)
    worst = 0.0
    for trial in range(20):
        model = toy_actor(seed=200 + trial)
        states, masks, a_e, a_r, adv = random_batch(rng)
        _, grads = actor_loss_and_grads(model, states, masks, a_e, a_r, adv)
        num = numeric_grads(
            model, lambda: actor_loss_and_grads(model, states, masks, a_e, a_r, adv)[0])
        worst = max(worst, max_rel_err(grads, num))
    assert worst < 1e-4


def test_actor_gradients_with_entropy_match_finite_differences():
    rng = np.random.default_rng(41)
    model = toy_actor(seed=300)
    states, masks, a_e, a_r, adv = random_batch(rng)
    kwargs = dict(entropy_coef=0.05)
    _, grads = actor_loss_and_grads(model, states, masks, a_e, a_r, adv, **kwargs)
    num = numeric_grads(
        model,
        lambda: actor_loss_and_grads(model, states, masks, a_e, a_r, adv, **kwargs)[0])
    assert max_rel_err(grads, num) < 1e-4


def test_masked_slots_receive_zero_gradient():
    model = toy_actor(seed=11)
    rng = np.random.default_rng(4)
    states, masks, a_e, a_r, adv = random_batch(rng, batch=3)
    adv = np.abs(adv) + 0.5
    _, grads = actor_loss_and_grads(model, states, masks, a_e, a_r, adv)
    # Head bias gradient for relay logits must vanish where every sample masks
    # the slot out.
    n_e = POLICY_SPLIT[0]
    gb_head = grads[-1][1]
    always_masked = ~masks.any(axis=0)
    assert np.all(gb_head[n_e:][always_masked] == 0.0)


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def test_apply_zero_gradients_identity():
    model = toy_actor(seed=12)
    before = [W.copy() for W in model.W]
    apply_gradients(model, model.zeros_like_grads(), 0.1)
    for W, B in zip(model.W, before):
        assert np.array_equal(W, B)


def test_apply_gradients_arithmetic():
    model = MlpModel((1, 1), "value", [np.array([[1.0]])], [np.array([0.0])])
    apply_gradients(model, [(np.array([[2.0]]), np.array([0.0]))], 0.1)
    assert model.W[0][0, 0] == pytest.approx(0.8)


def test_apply_gradients_shape_mismatch():
    model = toy_critic(seed=13)
    bad = [(np.zeros((2, 2)), np.zeros(2)) for _ in model.W]
    with pytest.raises(ValueError, match="shape"):
        apply_gradients(model, bad, 0.1)


def test_sequential_updates_commute_with_summed():
    # Plain descent from the same base point: applying g1 then g2 equals
    # applying g1+g2, up to float round-off.
    m1 = toy_critic(seed=14)
    m2 = m1.copy()
    rng = np.random.default_rng(5)
    g1 = [(rng.normal(size=W.shape), rng.normal(size=b.shape)) for W, b in zip(m1.W, m1.b)]
    g2 = [(rng.normal(size=W.shape), rng.normal(size=b.shape)) for W, b in zip(m1.W, m1.b)]
    apply_gradients(m1, g1, 0.01)
    apply_gradients(m1, g2, 0.01)
    summed = [(a + c, b + d) for (a, b), (c, d) in zip(g1, g2)]
    apply_gradients(m2, summed, 0.01)
    for W1, W2 in zip(m1.W, m2.W):
        assert np.allclose(W1, W2, atol=1e-15)


def test_update_direction_increases_chosen_probability():
    # One positive-advantage step must not decrease pi(a|s).
    model = toy_actor(seed=15)
    state = np.random.default_rng(6).normal(size=5)
    mask = np.zeros(16, dtype=bool)
    mask[[2, 6, 12]] = True
    p_e0, p_r0 = forward_policy(model, state, mask)
    _, grads = actor_loss_and_grads(model, state[None, :], mask[None, :], [1], [6], [1.0])
    apply_gradients(model, grads, 0.05)
    p_e1, p_r1 = forward_policy(model, state, mask)
    assert p_e1[1] >= p_e0[1]
    assert p_r1[6] >= p_r0[6]


def test_clip_global_norm():
    grads = [(np.full((2, 2), 3.0), np.full(2, 4.0))]
    norm = clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(np.sqrt(4 * 9 + 2 * 16))
    total = np.sqrt(sum(float((g * g).sum()) for pair in grads for g in pair))
    assert total == pytest.approx(1.0)
    small = [(np.full((1, 1), 0.1), np.zeros(1))]
    clip_global_norm(small, 5.0)
    assert small[0][0][0, 0] == pytest.approx(0.1)  # untouched below the bound


def test_adam_moves_parameters():
    model = toy_critic(seed=16)
    opt = make_optimizer("adam", model)
    assert isinstance(opt, AdamOptimizer)
    assert make_optimizer("sgd", model) is None
    states = np.random.default_rng(7).normal(size=(4, 5))
    before = model.W[0].copy()
    _, grads = critic_loss_and_grads(model, states, np.ones(4) * 10)
    opt.apply(model, grads, 1e-3)
    assert not np.array_equal(model.W[0], before)
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", model)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = new_actor(seed=17)
    path = str(tmp_path / "actor.npz")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.dims == model.dims and loaded.head == model.head
    state = np.random.default_rng(8).normal(size=49)
    mask = np.ones(16, dtype=bool)
    p0 = forward_policy(model, state, mask)
    p1 = forward_policy(loaded, state, mask)
    assert np.array_equal(p0[0], p1[0]) and np.array_equal(p0[1], p1[1])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, junk=np.zeros(3))
    with pytest.raises(ValueError, match="checkpoint"):
        load_model(str(path))


def test_split_logits_shapes():
    e, r = split_logits(np.arange(20.0))
    assert e.shape == (4,) and r.shape == (16,)
    assert masked_softmax(np.zeros(4)).sum() == pytest.approx(1.0)
