"""Dataset generators, the LQ oracle, reward tuning, batching, and the binary file format."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dac import data


def test_bandit_reward_examples():
    # distance from the goal (0.4, -0.4)
    assert data.bandit_reward(np.array([[0.4, -0.4]]))[0] == pytest.approx(0.0)
    assert data.bandit_reward(np.array([[1.4, -0.4]]))[0] == pytest.approx(-1.0)
    assert data.bandit_reward(np.array([[0.4, 0.6]]))[0] == pytest.approx(-1.0)
    assert data.bandit_reward(np.array([[1.4, 0.6]]))[0] == pytest.approx(-np.sqrt(2))


def test_ring_centers_geometry():
    centers = data.bandit_mode_centers(data.BanditSpec(pattern="ring"))
    assert centers.shape == (8, 2)
    assert np.allclose(np.linalg.norm(centers, axis=1), 0.8)
    angles = np.arctan2(centers[:, 1], centers[:, 0])
    assert angles[0] == pytest.approx(np.pi / 8)


def test_two_mode_centers_symmetric_about_goal():
    spec = data.BanditSpec(pattern="two_mode")
    centers = data.bandit_mode_centers(spec)
    assert centers.shape == (2, 2)
    assert np.allclose(centers.mean(axis=0), spec.goal)
    # equal noiseless reward at both modes
    r = data.bandit_reward(centers, spec.goal)
    assert r[0] == pytest.approx(r[1])


def test_bandit_dataset_shape_and_bounds():
    spec = data.BanditSpec(n=300, pattern="ring", seed=3)
    ds = data.generate_bandit_dataset(spec)
    assert len(ds) == 300
    assert ds.state_dim == 1 and ds.action_dim == 2
    assert np.all(ds.actions >= -1.0) and np.all(ds.actions <= 1.0)
    assert np.all(ds.terminals)
    assert np.all(ds.states == 0.0)


def test_bandit_dataset_actions_near_modes():
    spec = data.BanditSpec(n=2000, pattern="ring", noise_std=0.05, seed=0)
    ds = data.generate_bandit_dataset(spec)
    centers = data.bandit_mode_centers(spec)
    dists = np.linalg.norm(ds.actions[:, None, :] - centers[None], axis=2).min(axis=1)
    assert np.mean(dists < 3 * spec.noise_std) > 0.98


def test_bandit_dataset_deterministic_per_seed():
    spec = data.BanditSpec(n=50, seed=11)
    a = data.generate_bandit_dataset(spec)
    b = data.generate_bandit_dataset(spec)
    assert np.array_equal(a.actions, b.actions)
    assert np.array_equal(a.rewards, b.rewards)


def test_bandit_spec_validation():
    with pytest.raises(ValueError):
        data.BanditSpec(pattern="spiral")
    with pytest.raises(ValueError):
        data.BanditSpec(n=0)


def test_lq_oracle_limits():
    _, oracle = data.generate_lq_dataset(10, seed=0)
    # eta -> infinity removes the reward term: optimum collapses to the behavior
    mu, sigma = oracle.optimum(1e9)
    assert np.abs(mu - oracle.mu_b).max() < 1e-6
    assert np.abs(sigma - oracle.sigma_b).max() < 1e-6


def test_lq_oracle_zero_reward_is_behavior():
    oracle = data.LqOracle(mu_b=np.array([0.3, -0.2]), sigma_b=np.eye(2) * 0.5,
                           m=np.zeros((2, 2)), c=np.zeros(2))
    mu, sigma = oracle.optimum(1.0)
    assert np.allclose(mu, oracle.mu_b)
    assert np.allclose(sigma, oracle.sigma_b)


def test_lq_default_optimum_closed_form():
    # M = I, c = (1, 0), Sigma_b = I, mu_b = 0, eta = 1:
    # Sigma* = (I + I)^-1 = I/2, mu* = Sigma* c = (0.5, 0)
    _, oracle = data.generate_lq_dataset(10)
    mu, sigma = oracle.optimum(1.0)
    assert np.allclose(mu, [0.5, 0.0], atol=1e-12)
    assert np.allclose(sigma, np.eye(2) / 2, atol=1e-12)


def test_lq_optimum_matches_grid_argmax():
    _, oracle = data.generate_lq_dataset(10)
    axis = np.arange(-2.0, 2.0 + 1e-9, 0.01)
    xx, yy = np.meshgrid(axis, axis)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dens = oracle.log_density_unnormalized(pts, eta=1.0)
    best = pts[np.argmax(dens)]
    mu, _ = oracle.optimum(1.0)
    assert np.abs(best - mu).max() < 0.011


def test_lq_reward_grad_is_gradient():
    _, oracle = data.generate_lq_dataset(10)
    a = np.array([[0.3, -0.7]])
    g = oracle.reward_grad(a)[0]
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (oracle.reward(a + e) - oracle.reward(a - e))[0] / (2 * h)
        assert g[i] == pytest.approx(fd, abs=1e-6)


def test_lq_oracle_rejects_bad_matrices():
    with pytest.raises(data.DomainError):
        data.LqOracle(mu_b=np.zeros(2), sigma_b=np.eye(2),
                      m=np.array([[-1.0, 0.0], [0.0, 1.0]]), c=np.zeros(2))
    with pytest.raises(data.DomainError):
        data.LqOracle(mu_b=np.zeros(2), sigma_b=np.zeros((2, 2)),
                      m=np.eye(2), c=np.zeros(2))


def test_lq_oracle_json_round_trip(tmp_path):
    _, oracle = data.generate_lq_dataset(5, seed=2, c=(0.7, -0.3))
    path = tmp_path / "oracle.json"
    data.save_lq_oracle(oracle, path)
    loaded = data.load_lq_oracle(path)
    assert np.array_equal(loaded.mu_b, oracle.mu_b)
    assert np.array_equal(loaded.sigma_b, oracle.sigma_b)
    assert np.array_equal(loaded.m, oracle.m)
    assert np.array_equal(loaded.c, oracle.c)


def test_tune_rewards_span_1000():
    ds = data.generate_bandit_dataset(data.BanditSpec(n=200, seed=1))
    tuned = data.tune_rewards(ds)
    returns = tuned.trajectory_returns()
    assert returns.max() - returns.min() == pytest.approx(1000.0)


def test_tune_rewards_preserves_argmax():
    ds = data.generate_bandit_dataset(data.BanditSpec(n=200, seed=1))
    tuned = data.tune_rewards(ds)
    assert np.argmax(ds.rewards) == np.argmax(tuned.rewards)
    assert np.argmin(ds.rewards) == np.argmin(tuned.rewards)


def test_tune_rewards_degenerate_cases():
    zeros = np.zeros((3, 1))
    flat = data.OfflineDataset(
        states=zeros, actions=np.zeros((3, 2)), rewards=np.full(3, 2.5),
        next_states=zeros, terminals=np.ones(3, dtype=bool),
        trajectory_starts=np.arange(3, dtype=np.int64),
        action_low=np.full(2, -1.0), action_high=np.full(2, 1.0))
    with pytest.raises(data.DegenerateRangeError):
        data.tune_rewards(flat)
    single = dataclasses.replace(flat, trajectory_starts=np.array([0], dtype=np.int64))
    with pytest.raises(data.DegenerateRangeError):
        data.tune_rewards(single)


def test_trajectory_returns_segments():
    zeros = np.zeros((5, 1))
    ds = data.OfflineDataset(
        states=zeros, actions=np.zeros((5, 2)),
        rewards=np.array([1.0, 2.0, 3.0, 4.0, 5.0]),
        next_states=zeros, terminals=np.zeros(5, dtype=bool),
        trajectory_starts=np.array([0, 2], dtype=np.int64),
        action_low=np.full(2, -1.0), action_high=np.full(2, 1.0))
    assert ds.trajectory_returns().tolist() == [3.0, 12.0]


def test_trajectory_starts_validation():
    zeros = np.zeros((3, 1))
    with pytest.raises(ValueError):
        data.OfflineDataset(
            states=zeros, actions=np.zeros((3, 2)), rewards=np.zeros(3),
            next_states=zeros, terminals=np.zeros(3, dtype=bool),
            trajectory_starts=np.array([1, 2], dtype=np.int64),
            action_low=np.full(2, -1.0), action_high=np.full(2, 1.0))


def test_sample_batch_shapes_and_errors():
    ds = data.generate_bandit_dataset(data.BanditSpec(n=40, seed=0))
    batch = data.sample_batch(ds, 16, np.random.default_rng(0))
    assert batch.states.shape == (16, 1)
    assert batch.actions.shape == (16, 2)
    assert batch.rewards.shape == (16,)
    with pytest.raises(ValueError):
        data.sample_batch(ds, 0, np.random.default_rng(0))


def test_sample_batch_draws_existing_rows():
    ds = data.generate_bandit_dataset(data.BanditSpec(n=30, seed=5))
    batch = data.sample_batch(ds, 64, np.random.default_rng(1))
    for a in batch.actions:
        assert np.any(np.all(ds.actions == a, axis=1))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_dataset_file_round_trip_bit_exact(n, seed):
    ds = data.generate_bandit_dataset(data.BanditSpec(n=n, seed=seed))
    import tempfile, os
    fd, path = tempfile.mkstemp(suffix=".dacd")
    os.close(fd)
    try:
        data.save_dataset(ds, path)
        loaded = data.load_dataset(path)
    finally:
        os.unlink(path)
    assert np.array_equal(loaded.states, ds.states)
    assert np.array_equal(loaded.actions, ds.actions)
    assert np.array_equal(loaded.rewards, ds.rewards)
    assert np.array_equal(loaded.next_states, ds.next_states)
    assert np.array_equal(loaded.terminals, ds.terminals)
    assert np.array_equal(loaded.trajectory_starts, ds.trajectory_starts)
    assert np.array_equal(loaded.action_low, ds.action_low)
    assert np.array_equal(loaded.action_high, ds.action_high)


def test_dataset_file_bad_magic(tmp_path):
    p = tmp_path / "x.dacd"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(data.FormatError, match="magic"):
        data.load_dataset(p)


def test_dataset_file_truncation_reports_offset(tmp_path):
    ds = data.generate_bandit_dataset(data.BanditSpec(n=20, seed=0))
    p = tmp_path / "full.dacd"
    data.save_dataset(ds, p)
    raw = p.read_bytes()
    for cut in (6, 30, len(raw) - 5):
        q = tmp_path / f"cut{cut}.dacd"
        q.write_bytes(raw[:cut])
        with pytest.raises(data.FormatError, match="offset"):
            data.load_dataset(q)


def test_dataset_file_unsupported_version(tmp_path):
    ds = data.generate_bandit_dataset(data.BanditSpec(n=5, seed=0))
    p = tmp_path / "v.dacd"
    data.save_dataset(ds, p)
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(data.FormatError, match="version"):
        data.load_dataset(p)
