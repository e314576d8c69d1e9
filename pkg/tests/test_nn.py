"""MLP construction, gradients, Adam, EMA, LR decay, parameter files."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dac import autodiff as ad
from dac import nn


def test_forward_zero_weights_returns_bias():
    layers = ((np.zeros((3, 2)), np.array([1.0, -2.0, 0.5])),)
    params = nn.MlpParams(layers=layers, activation="identity",
                          input_dim=2, output_dim=3)
    out = nn.mlp_forward(params, np.array([[5.0, 7.0]]))
    assert np.array_equal(out[0], [1.0, -2.0, 0.5])


def test_forward_identity_layer():
    layers = ((np.eye(4), np.zeros(4)),)
    params = nn.MlpParams(layers=layers, activation="identity",
                          input_dim=4, output_dim=4)
    v = np.array([[0.1, -0.7, 2.0, 0.0]])
    assert np.allclose(nn.mlp_forward(params, v), v)


def test_forward_hand_evaluated_2_3_1():
    w1 = np.array([[0.1, -0.3], [0.5, 0.2], [-0.4, 0.6]])
    b1 = np.array([0.05, -0.1, 0.2])
    w2 = np.array([[1.0, -2.0, 0.5]])
    b2 = np.array([0.3])
    params = nn.MlpParams(layers=((w1, b1), (w2, b2)), activation="mish",
                          input_dim=2, output_dim=1)
    x = np.array([0.5, -0.2])
    h_pre = w1 @ x + b1
    h = h_pre * np.tanh(np.logaddexp(0.0, h_pre))
    want = w2 @ h + b2
    got = nn.mlp_forward(params, x[None, :])
    assert np.allclose(got[0], want, atol=1e-12)


def test_forward_shape_error():
    params = nn.init_mlp(3, 1, np.random.default_rng(0), hidden_dim=4, n_hidden=1)
    with pytest.raises(nn.ShapeError):
        nn.mlp_forward(params, np.zeros((2, 5)))


def test_layer_chaining_validated():
    with pytest.raises(nn.ShapeError):
        nn.MlpParams(layers=((np.zeros((3, 2)), np.zeros(3)),
                             (np.zeros((1, 4)), np.zeros(1))))


def test_init_bounds_and_zero_bias():
    params = nn.init_mlp(9, 2, np.random.default_rng(0), hidden_dim=16, n_hidden=2)
    for (w, b), fan_in in zip(params.layers, [9, 16, 16]):
        assert np.abs(w).max() <= 1.0 / np.sqrt(fan_in)
        assert np.all(b == 0.0)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(7)
    params = nn.init_mlp(2, 1, rng, hidden_dim=6, n_hidden=2)
    x = rng.uniform(-1, 1, size=(5, 2))
    y = rng.uniform(-1, 1, size=(5, 1))

    def loss_nodes(nodes):
        out = nn.mlp_forward_graph(nodes, x, "mish")
        return ad.nmean(ad.square(ad.sub(out, y)))

    got = nn.grad(loss_nodes, params)
    from dac.verify import finite_difference_grads
    want = finite_difference_grads(
        params, lambda p: float(np.mean((nn.mlp_forward(p, x) - y) ** 2)))
    for lg, lw in zip(got, want):
        for g, w in zip(lg, lw):
            assert np.abs(g - w).max() / max(np.abs(w).max(), 1.0) < 1e-4


def test_grad_rejects_non_graph_loss():
    params = nn.init_mlp(2, 1, np.random.default_rng(0), hidden_dim=3, n_hidden=1)
    with pytest.raises(ad.UnsupportedPrimitiveError):
        nn.grad(lambda nodes: 1.0, params)


def test_adam_zero_gradient_is_identity():
    tree = [(np.array([[1.0, 2.0]]), np.array([3.0]))]
    state = nn.adam_init(tree)
    zeros = [(np.zeros((1, 2)), np.zeros(1))]
    new, state2 = nn.adam_step(tree, zeros, state, lr=0.1)
    assert np.array_equal(new[0][0], tree[0][0])
    assert np.array_equal(new[0][1], tree[0][1])
    assert state2.step == 1


def test_adam_first_step_magnitude():
    # scalar param 0, grad 1, lr 0.1: bias-corrected first step moves by ~ -0.1
    tree = [(np.array([[0.0]]), np.zeros(1))]
    grads = [(np.array([[1.0]]), np.zeros(1))]
    new, _ = nn.adam_step(tree, grads, nn.adam_init(tree), lr=0.1)
    assert np.allclose(new[0][0], -0.1, atol=1e-7)


def test_adam_monotone_on_quadratic():
    w = np.array([[2.0]])
    state = nn.adam_init([(w, np.zeros(1))])
    tree = [(w, np.zeros(1))]
    losses = []
    for _ in range(50):
        g = [(2.0 * tree[0][0], np.zeros(1))]
        tree, state = nn.adam_step(tree, g, state, lr=0.05)
        losses.append(float(tree[0][0][0, 0] ** 2))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_adam_rejects_nonfinite_with_index():
    tree = [(np.zeros((2, 2)), np.zeros(2)), (np.zeros((1, 2)), np.zeros(1))]
    grads = [(np.zeros((2, 2)), np.zeros(2)), (np.full((1, 2), np.nan), np.zeros(1))]
    with pytest.raises(nn.NumericError, match="layer 1"):
        nn.adam_step(tree, grads, nn.adam_init(tree), lr=0.1)


def test_cosine_lr_endpoints():
    assert nn.cosine_lr(0, 100, 3e-4) == pytest.approx(3e-4)
    assert nn.cosine_lr(100, 100, 3e-4) == pytest.approx(0.0, abs=1e-18)
    assert nn.cosine_lr(50, 100, 3e-4) == pytest.approx(1.5e-4)
    assert isinstance(nn.cosine_lr(3, 10, 1e-3), float)


def test_cosine_lr_range_errors():
    with pytest.raises(ValueError):
        nn.cosine_lr(11, 10, 1e-3)
    with pytest.raises(ValueError):
        nn.cosine_lr(5, 10, 0.0)


def test_ema_corner_rates():
    target = [(np.zeros((2, 2)), np.zeros(2))]
    online = [(np.full((2, 2), 2.0), np.full(2, 2.0))]
    assert np.array_equal(nn.ema_update(target, online, 0.0)[0][0], np.zeros((2, 2)))
    assert np.array_equal(nn.ema_update(target, online, 1.0)[0][0], online[0][0])
    assert np.all(nn.ema_update(target, online, 0.5)[0][0] == 1.0)
    with pytest.raises(ValueError):
        nn.ema_update(target, online, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_ema_is_convex_combination(alpha, seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(-3, 3, size=(3, 2))
    o = rng.uniform(-3, 3, size=(3, 2))
    out = nn.ema_update([(t, np.zeros(2))], [(o, np.zeros(2))], alpha)[0][0]
    lo, hi = np.minimum(t, o), np.maximum(t, o)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_params_file_round_trip(tmp_path):
    params = nn.init_mlp(3, 2, np.random.default_rng(5), hidden_dim=7, n_hidden=2)
    path = tmp_path / "net.dacp"
    nn.save_params(params, path)
    loaded = nn.load_params(path)
    for (w, b), (w2, b2) in zip(params.layers, loaded.layers):
        assert np.array_equal(w, w2) and np.array_equal(b, b2)


def test_params_file_bad_magic(tmp_path):
    path = tmp_path / "bad.dacp"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(nn.FormatError, match="magic"):
        nn.load_params(path)


def test_params_file_truncated(tmp_path):
    params = nn.init_mlp(3, 2, np.random.default_rng(5), hidden_dim=7, n_hidden=1)
    path = tmp_path / "net.dacp"
    nn.save_params(params, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.dacp").write_bytes(raw[:len(raw) - 9])
    with pytest.raises(nn.FormatError, match="offset"):
        nn.load_params(tmp_path / "trunc.dacp")
