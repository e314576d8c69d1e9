"""Q-ensemble: LCB pessimism, Bellman targets, scale constant, Q-gradients."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dac import critic, data, nn


def _tiny_ensemble(rng=None, h=4, rho=1.0, gamma=0.99, hidden_dim=8, n_hidden=2,
                   state_dim=1, action_dim=2, **kw):
    rng = rng or np.random.default_rng(0)
    return critic.init_ensemble(h, state_dim, action_dim, rng, rho=rho, gamma=gamma,
                                hidden_dim=hidden_dim, n_hidden=n_hidden, **kw)


def _zero_output(ensemble):
    """Zero the last layer of members and targets so every Q is exactly 0."""
    def zero_last(params):
        layers = list(params.layers)
        w, b = layers[-1]
        layers[-1] = (np.zeros_like(w), np.zeros_like(b))
        return nn.with_layers(params, layers)
    return dataclasses.replace(ensemble, members=zero_last(ensemble.members),
                               targets=zero_last(ensemble.targets))


def test_lcb_two_point_example():
    assert critic.lcb(np.array([0.0, 2.0]), rho=1.0) == pytest.approx(0.0)
    assert critic.lcb(np.array([0.0, 2.0]), rho=0.0) == pytest.approx(1.0)


def test_lcb_validation():
    with pytest.raises(ValueError):
        critic.lcb(np.zeros((0, 3)), rho=1.0)
    with pytest.raises(ValueError):
        critic.lcb(np.array([1.0]), rho=-0.5)


def test_lcb_uses_population_std():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    want = v.mean() - v.std(ddof=0)
    assert critic.lcb(v, rho=1.0) == pytest.approx(want)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_lcb_never_exceeds_mean(seed, rho):
    v = np.random.default_rng(seed).standard_normal(8)
    assert critic.lcb(v, rho) <= v.mean() + 1e-12


def test_lcb_usually_above_min_for_h10():
    rng = np.random.default_rng(0)
    hits = 0
    trials = 2000
    for _ in range(trials):
        v = rng.standard_normal(10)
        if critic.lcb(v, rho=1.0) > v.min():
            hits += 1
    assert hits / trials >= 0.95


def test_value_target_mode_validation():
    with pytest.raises(ValueError):
        critic.ValueTargetMode(aggregate="median")
    with pytest.raises(ValueError):
        critic.ValueTargetMode(m_samples=0)


def test_init_ensemble_members_distinct_targets_equal():
    ens = _tiny_ensemble(h=5)
    assert ens.size == 5
    w = ens.members.layers[0][0]
    assert not np.allclose(w[0], w[1])
    for (wm, bm), (wt, bt) in zip(ens.members.layers, ens.targets.layers):
        assert np.array_equal(wm, wt) and np.array_equal(bm, bt)


def test_ensemble_validation():
    ens = _tiny_ensemble()
    with pytest.raises(ValueError):
        dataclasses.replace(ens, rho=-1.0)
    with pytest.raises(ValueError):
        dataclasses.replace(ens, pessimism="optimism")


def test_member_q_values_shape():
    ens = _tiny_ensemble(h=3)
    q = critic.member_q_values(ens.members, np.zeros((7, 1)), np.zeros((7, 2)))
    assert q.shape == (3, 7)


def test_estimate_scale_c_floor():
    ens = _zero_output(_tiny_ensemble())
    ds = data.generate_bandit_dataset(data.BanditSpec(n=50, seed=0))
    c = critic.estimate_scale_c(ens, ds, 32, np.random.default_rng(0))
    assert c == critic.C_FLOOR


def test_estimate_scale_c_positive_homogeneous():
    ens = _tiny_ensemble(h=3)
    ds = data.generate_bandit_dataset(data.BanditSpec(n=200, seed=1))

    def scaled(e, k):
        layers = list(e.targets.layers)
        w, b = layers[-1]
        layers[-1] = (k * w, k * b)
        return dataclasses.replace(e, targets=nn.with_layers(e.targets, layers))

    c1 = critic.estimate_scale_c(ens, ds, 128, np.random.default_rng(0))
    c5 = critic.estimate_scale_c(scaled(ens, 5.0), ds, 128, np.random.default_rng(0))
    assert c5 == pytest.approx(5.0 * c1, rel=1e-12)


def test_q_gradient_requires_scale_c():
    ens = _tiny_ensemble()
    with pytest.raises(ValueError):
        critic.q_gradient(ens, np.zeros(1), np.zeros(2))


def test_q_gradient_matches_finite_differences():
    ens = dataclasses.replace(_tiny_ensemble(h=3), scale_c=0.7)
    s = np.array([[0.0]])
    x = np.array([[0.3, -0.4]])
    g = critic.q_gradient(ens, s, x)

    def mean_q(xv):
        return critic.member_q_values(ens.targets, s, xv).mean()

    h = 1e-6
    for i in range(2):
        e = np.zeros((1, 2))
        e[0, i] = h
        fd = (mean_q(x + e) - mean_q(x - e)) / (2 * h) / ens.scale_c
        assert g[0, i] == pytest.approx(fd, abs=1e-5)


def test_q_gradient_scale_invariant_under_output_scaling():
    ds = data.generate_bandit_dataset(data.BanditSpec(n=200, seed=2))
    base = _tiny_ensemble(h=3)
    x = np.array([[0.1, 0.2]])
    s = np.zeros((1, 1))

    def with_c(e):
        c = critic.estimate_scale_c(e, ds, 128, np.random.default_rng(0))
        return dataclasses.replace(e, scale_c=c)

    def scaled(e, k):
        layers = list(e.targets.layers)
        w, b = layers[-1]
        layers[-1] = (k * w, k * b)
        return dataclasses.replace(e, targets=nn.with_layers(e.targets, layers))

    g1 = critic.q_gradient(with_c(base), s, x)
    g100 = critic.q_gradient(with_c(scaled(base, 100.0)), s, x)
    assert np.abs(g1 - g100).max() < 1e-10


def test_q_gradient_1d_input_returns_1d():
    ens = dataclasses.replace(_tiny_ensemble(), scale_c=1.0)
    g = critic.q_gradient(ens, np.zeros(1), np.zeros(2))
    assert g.shape == (2,)


def test_aggregate_next_values_orders():
    ens = dataclasses.replace(_tiny_ensemble(h=2), rho=1.0)
    # H=2 members, M=2 draws, B=1
    q = np.array([[[0.0], [2.0]],
                  [[4.0], [6.0]]])
    # mean over draws -> members (1, 5); lcb rho=1 -> 3 - 2 = 1
    out = critic.aggregate_next_values(ens, q, critic.ValueTargetMode("mean", 2))
    assert out[0] == pytest.approx(1.0)
    # max over draws -> members (2, 6); lcb -> 4 - 2 = 2
    out = critic.aggregate_next_values(ens, q, critic.ValueTargetMode("max", 2))
    assert out[0] == pytest.approx(2.0)
    # min-ablation: mean draws -> (1, 5) -> min 1
    ens_min = dataclasses.replace(ens, pessimism="min")
    out = critic.aggregate_next_values(ens_min, q, critic.ValueTargetMode("mean", 2))
    assert out[0] == pytest.approx(1.0)


def test_aggregate_lcb_before_aggregation_flips_order():
    ens = dataclasses.replace(_tiny_ensemble(h=2), rho=1.0,
                              lcb_before_aggregation=True)
    q = np.array([[[0.0], [2.0]],
                  [[4.0], [6.0]]])
    # lcb per draw: (2-2, 4-2) = (0, 2); mean -> 1
    out = critic.aggregate_next_values(ens, q, critic.ValueTargetMode("mean", 2))
    assert out[0] == pytest.approx(1.0)
    # max over draws of per-draw lcb -> 2
    out = critic.aggregate_next_values(ens, q, critic.ValueTargetMode("max", 2))
    assert out[0] == pytest.approx(2.0)


def test_value_target_consistent_with_manual_aggregation():
    ens = _tiny_ensemble(h=3)
    s_next = np.random.default_rng(3).standard_normal((4, 1))
    fixed = np.random.default_rng(4).standard_normal((2, 4, 2))
    mode = critic.ValueTargetMode("mean", 2)
    got = critic.value_target(s_next, lambda s, m, rng: fixed, ens, mode,
                              np.random.default_rng(0))
    q = np.stack([
        critic.member_q_values(ens.targets, s_next, fixed[j]) for j in range(2)
    ], axis=1)  # (H, M, B)
    want = critic.aggregate_next_values(ens, q, mode)
    assert np.allclose(got, want, atol=1e-12)


def test_bellman_targets_masks_terminals():
    ens = dataclasses.replace(_zero_output(_tiny_ensemble()), gamma=0.5)
    batch = data.Batch(states=np.zeros((2, 1)), actions=np.zeros((2, 2)),
                       rewards=np.array([1.0, 1.0]), next_states=np.zeros((2, 1)),
                       terminals=np.array([True, False]))
    y = critic.bellman_targets(ens, batch, v_next=np.array([10.0, 10.0]))
    assert y.tolist() == [1.0, 6.0]


def test_bellman_targets_all_terminal_allows_none():
    ens = _tiny_ensemble()
    batch = data.Batch(states=np.zeros((2, 1)), actions=np.zeros((2, 2)),
                       rewards=np.array([3.0, -1.0]), next_states=np.zeros((2, 1)),
                       terminals=np.array([True, True]))
    assert critic.bellman_targets(ens, batch, None).tolist() == [3.0, -1.0]
    bad = dataclasses.replace(batch, terminals=np.array([True, False]))
    with pytest.raises(ValueError):
        critic.bellman_targets(ens, bad, None)


def test_critic_loss_hand_computed():
    # Q == 0 everywhere, terminal rewards 2.8 -> mse (2.8)^2 = 7.84
    ens = _zero_output(_tiny_ensemble(h=3))
    batch = data.Batch(states=np.zeros((4, 1)), actions=np.zeros((4, 2)),
                       rewards=np.full(4, 2.8), next_states=np.zeros((4, 1)),
                       terminals=np.ones(4, dtype=bool))
    for member in range(3):
        assert critic.critic_loss(member, batch, None, ens) == pytest.approx(7.84)


def test_critic_update_reduces_loss():
    ens = _tiny_ensemble(h=2, hidden_dim=16)
    ds = data.generate_bandit_dataset(data.BanditSpec(n=64, seed=0))
    batch = data.sample_batch(ds, 64, np.random.default_rng(0))
    opt = nn.adam_init(nn.tree_layers(ens.members))
    first = None
    for _ in range(150):
        ens, opt, losses = critic.critic_update(ens, batch, None, opt, lr=1e-2)
        if first is None:
            first = losses.copy()
    assert losses.shape == (2,)
    assert np.all(losses < 0.5 * first)


def test_critic_update_leaves_targets_untouched():
    ens = _tiny_ensemble(h=2)
    batch = data.Batch(states=np.zeros((3, 1)),
                       actions=np.array([[0.5, -0.2], [0.1, 0.9], [-0.7, 0.3]]),
                       rewards=np.ones(3), next_states=np.zeros((3, 1)),
                       terminals=np.ones(3, dtype=bool))
    opt = nn.adam_init(nn.tree_layers(ens.members))
    new, _, _ = critic.critic_update(ens, batch, None, opt, lr=1e-3)
    for (wt, bt), (wt2, bt2) in zip(ens.targets.layers, new.targets.layers):
        assert np.array_equal(wt, wt2) and np.array_equal(bt, bt2)
    assert not np.array_equal(ens.members.layers[0][0], new.members.layers[0][0])


def test_ema_update_targets_rates():
    ens = _tiny_ensemble(h=2)
    batch = data.Batch(states=np.zeros((3, 1)), actions=np.zeros((3, 2)),
                       rewards=np.ones(3), next_states=np.zeros((3, 1)),
                       terminals=np.ones(3, dtype=bool))
    opt = nn.adam_init(nn.tree_layers(ens.members))
    moved, _, _ = critic.critic_update(ens, batch, None, opt, lr=1e-2)
    full = critic.ema_update_targets(moved, 1.0)
    for (wm, _), (wt, _) in zip(full.members.layers, full.targets.layers):
        assert np.array_equal(wm, wt)
    frozen = critic.ema_update_targets(moved, 0.0)
    for (wt0, _), (wt, _) in zip(ens.targets.layers, frozen.targets.layers):
        assert np.array_equal(wt0, wt)


def test_mlp_input_grad_matches_tape():
    from dac import autodiff as ad

    rng = np.random.default_rng(11)
    ens = critic.init_ensemble(3, 2, 2, rng, rho=1.0, gamma=0.99,
                               hidden_dim=12, n_hidden=2)
    x = rng.standard_normal((7, 4))
    node = ad.Node(x)
    out = nn.mlp_forward_graph(list(ens.targets.layers), node,
                               ens.targets.activation)
    ad.nsum(out).backward()
    g = critic.mlp_input_grad(ens.targets, x)
    assert np.array_equal(g.sum(axis=0), node.grad)
