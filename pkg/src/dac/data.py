"""Offline datasets: bandit and linear-quadratic generators, reward tuning, file IO."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

MAGIC = b"DACD"
FORMAT_VERSION = 1

DEFAULT_GOAL = (0.4, -0.4)


class DegenerateRangeError(ValueError):
    pass


class FormatError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool


@dataclass(frozen=True)
class OfflineDataset:
    """Transitions stored as column arrays; immutable after construction."""

    states: np.ndarray       # (n, state_dim)
    actions: np.ndarray      # (n, action_dim)
    rewards: np.ndarray      # (n,)
    next_states: np.ndarray  # (n, state_dim)
    terminals: np.ndarray    # (n,) bool
    trajectory_starts: np.ndarray  # sorted, starts at 0
    action_low: np.ndarray   # (action_dim,)
    action_high: np.ndarray  # (action_dim,)

    def __post_init__(self):
        n = len(self.rewards)
        starts = self.trajectory_starts
        if n and (len(starts) == 0 or starts[0] != 0):
            raise ValueError("trajectory_starts must begin with 0")
        if np.any(np.diff(starts) <= 0) or (len(starts) and starts[-1] >= max(n, 1)):
            raise ValueError("trajectory_starts must be sorted and bounded by size")

    def __len__(self):
        return len(self.rewards)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def transition(self, i: int) -> Transition:
        return Transition(
            s=self.states[i], a=self.actions[i], r=float(self.rewards[i]),
            s_next=self.next_states[i], terminal=bool(self.terminals[i]),
        )

    def trajectory_returns(self) -> np.ndarray:
        """Undiscounted return per trajectory."""
        bounds = np.append(self.trajectory_starts, len(self))
        return np.array([
            self.rewards[lo:hi].sum() for lo, hi in zip(bounds[:-1], bounds[1:])
        ])


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray


# -- 2-D bandit --------------------------------------------------------------

@dataclass(frozen=True)
class BanditSpec:
    n: int = 400
    pattern: str = "ring"        # ring | crescent | grid | two_mode
    noise_std: float = 0.05
    goal: Tuple[float, float] = DEFAULT_GOAL
    reward_noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.pattern not in ("ring", "crescent", "grid", "two_mode"):
            raise ValueError(f"unknown bandit pattern {self.pattern!r}")


def bandit_mode_centers(spec: BanditSpec) -> np.ndarray:
    """Cluster centers of the behavior layout (used for mode-coverage metrics)."""
    if spec.pattern == "ring":
        angles = np.pi / 8 + np.linspace(0.0, 2 * np.pi, 8, endpoint=False)
        return 0.8 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if spec.pattern == "crescent":
        upper = np.linspace(0.25 * np.pi, 0.75 * np.pi, 8)
        lower = np.linspace(1.25 * np.pi, 1.75 * np.pi, 8)
        angles = np.concatenate([upper, lower])
        return 0.8 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if spec.pattern == "grid":
        g = np.linspace(-0.8, 0.8, 4)
        xx, yy = np.meshgrid(g, g)
        return np.stack([xx.ravel(), yy.ravel()], axis=1)
    # two equal-reward modes placed symmetrically about the goal
    gx, gy = spec.goal
    offset = np.array([0.35, 0.35])
    return np.stack([np.array([gx, gy]) + offset, np.array([gx, gy]) - offset])


def bandit_reward(actions: np.ndarray, goal=DEFAULT_GOAL) -> np.ndarray:
    """Noiseless reward: negative distance to the goal point."""
    d = np.asarray(actions, dtype=np.float64) - np.asarray(goal, dtype=np.float64)
    return -np.sqrt((d * d).sum(axis=-1))


def generate_bandit_dataset(spec: BanditSpec) -> OfflineDataset:
    rng = np.random.default_rng(spec.seed)
    centers = bandit_mode_centers(spec)
    idx = rng.integers(0, len(centers), size=spec.n)
    actions = centers[idx] + spec.noise_std * rng.standard_normal((spec.n, 2))
    actions = np.clip(actions, -1.0, 1.0)
    rewards = bandit_reward(actions, spec.goal)
    if spec.reward_noise_std > 0:
        rewards = rewards + spec.reward_noise_std * rng.standard_normal(spec.n)
    zeros = np.zeros((spec.n, 1))
    return OfflineDataset(
        states=zeros, actions=actions, rewards=rewards, next_states=zeros,
        terminals=np.ones(spec.n, dtype=bool),
        trajectory_starts=np.arange(spec.n, dtype=np.int64),
        action_low=np.array([-1.0, -1.0]), action_high=np.array([1.0, 1.0]),
    )


# -- linear-quadratic single-step environment -------------------------------

@dataclass(frozen=True)
class LqOracle:
    """Gaussian behavior with quadratic reward; the constrained optimum is Gaussian.

    reward(a) = -1/2 a^T M a + c^T a, behavior N(mu_b, Sigma_b).
    """

    mu_b: np.ndarray
    sigma_b: np.ndarray
    m: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if np.min(np.linalg.eigvalsh(self.m)) < -1e-12:
            raise DomainError("reward curvature matrix must be positive semi-definite")
        if np.min(np.linalg.eigvalsh(self.sigma_b)) <= 0:
            raise DomainError("behavior covariance must be positive-definite")

    @property
    def action_dim(self):
        return len(self.mu_b)

    def reward(self, a: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(a)
        return -0.5 * np.einsum("ni,ij,nj->n", a, self.m, a) + a @ self.c

    def reward_grad(self, a: np.ndarray) -> np.ndarray:
        return -np.atleast_2d(a) @ self.m + self.c

    def optimum(self, eta: float) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the KL-constrained optimal policy at multiplier eta."""
        prec_b = np.linalg.inv(self.sigma_b)
        lam = prec_b + self.m / eta
        sigma_star = np.linalg.inv(lam)
        mu_star = sigma_star @ (prec_b @ self.mu_b + self.c / eta)
        return mu_star, sigma_star

    def log_density_unnormalized(self, a: np.ndarray, eta: float) -> np.ndarray:
        """log pi_b(a) + reward(a) / eta, up to an additive constant."""
        a = np.atleast_2d(a)
        d = a - self.mu_b
        prec_b = np.linalg.inv(self.sigma_b)
        return -0.5 * np.einsum("ni,ij,nj->n", d, prec_b, d) + self.reward(a) / eta


def generate_lq_dataset(
    n: int,
    seed: int = 0,
    mu_b=(0.0, 0.0),
    sigma_b=((1.0, 0.0), (0.0, 1.0)),
    m=((1.0, 0.0), (0.0, 1.0)),
    c=(1.0, 0.0),
    bound: float = 3.0,
) -> Tuple[OfflineDataset, LqOracle]:
    if n < 1:
        raise ValueError("n must be >= 1")
    oracle = LqOracle(
        mu_b=np.asarray(mu_b, dtype=np.float64),
        sigma_b=np.asarray(sigma_b, dtype=np.float64),
        m=np.asarray(m, dtype=np.float64),
        c=np.asarray(c, dtype=np.float64),
    )
    rng = np.random.default_rng(seed)
    d = oracle.action_dim
    chol = np.linalg.cholesky(oracle.sigma_b)
    actions = oracle.mu_b + rng.standard_normal((n, d)) @ chol.T
    actions = np.clip(actions, -bound, bound)
    rewards = oracle.reward(actions)
    zeros = np.zeros((n, 1))
    dataset = OfflineDataset(
        states=zeros, actions=actions, rewards=rewards, next_states=zeros,
        terminals=np.ones(n, dtype=bool),
        trajectory_starts=np.arange(n, dtype=np.int64),
        action_low=np.full(d, -bound), action_high=np.full(d, bound),
    )
    return dataset, oracle


# -- transforms and sampling -------------------------------------------------

def tune_rewards(dataset: OfflineDataset) -> OfflineDataset:
    """Rescale rewards by 1000 / (max trajectory return - min trajectory return)."""
    returns = dataset.trajectory_returns()
    if len(returns) < 2:
        raise DegenerateRangeError("need at least 2 trajectories to tune rewards")
    span = returns.max() - returns.min()
    if span == 0.0:
        raise DegenerateRangeError("all trajectory returns equal; refusing to divide by zero")
    from dataclasses import replace
    return replace(dataset, rewards=dataset.rewards * (1000.0 / span))


def sample_batch(dataset: OfflineDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform with-replacement minibatch."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return Batch(
        states=dataset.states[idx], actions=dataset.actions[idx],
        rewards=dataset.rewards[idx], next_states=dataset.next_states[idx],
        terminals=dataset.terminals[idx],
    )


# -- file format -------------------------------------------------------------

def save_dataset(dataset: OfflineDataset, path) -> None:
    """Header (magic, version, dims, counts, bounds), then trajectory starts,
    then packed little-endian f64 records (s, a, r, s', terminal-as-0/1)."""
    n = len(dataset)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIQI", FORMAT_VERSION, dataset.state_dim,
                            dataset.action_dim, n, len(dataset.trajectory_starts)))
        f.write(np.ascontiguousarray(dataset.action_low, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dataset.action_high, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dataset.trajectory_starts, dtype="<u8").tobytes())
        records = np.concatenate([
            dataset.states, dataset.actions, dataset.rewards[:, None],
            dataset.next_states, dataset.terminals[:, None].astype(np.float64),
        ], axis=1)
        f.write(np.ascontiguousarray(records, dtype="<f8").tobytes())


def load_dataset(path) -> OfflineDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r} (offset 0)")
    off = 4
    try:
        version, s_dim, a_dim, n, n_traj = struct.unpack_from("<IIIQI", raw, off)
    except struct.error:
        raise FormatError(f"truncated header at offset {off}") from None
    off += struct.calcsize("<IIIQI")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} (offset 4)")

    def take(count):
        nonlocal off
        need = 8 * count
        if off + need > len(raw):
            raise FormatError(f"truncated file at offset {off} (need {need} bytes)")
        out = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += need
        return out

    low = take(a_dim).copy()
    high = take(a_dim).copy()
    if off + 8 * n_traj > len(raw):
        raise FormatError(f"truncated trajectory index at offset {off}")
    starts = np.frombuffer(raw, dtype="<u8", count=n_traj, offset=off).astype(np.int64)
    off += 8 * n_traj
    width = 2 * s_dim + a_dim + 2
    records = take(n * width).reshape(n, width)
    return OfflineDataset(
        states=records[:, :s_dim].copy(),
        actions=records[:, s_dim:s_dim + a_dim].copy(),
        rewards=records[:, s_dim + a_dim].copy(),
        next_states=records[:, s_dim + a_dim + 1:2 * s_dim + a_dim + 1].copy(),
        terminals=records[:, -1].astype(bool),
        trajectory_starts=starts,
        action_low=low, action_high=high,
    )


def save_lq_oracle(oracle: LqOracle, path) -> None:
    """JSON sidecar with the behavior and reward parameters of an LQ dataset."""
    payload = {
        "mu_b": oracle.mu_b.tolist(),
        "sigma_b": oracle.sigma_b.tolist(),
        "m": oracle.m.tolist(),
        "c": oracle.c.tolist(),
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def load_lq_oracle(path) -> LqOracle:
    with open(path) as f:
        payload = json.load(f)
    return LqOracle(
        mu_b=np.asarray(payload["mu_b"], dtype=np.float64),
        sigma_b=np.asarray(payload["sigma_b"], dtype=np.float64),
        m=np.asarray(payload["m"], dtype=np.float64),
        c=np.asarray(payload["c"], dtype=np.float64),
    )
