"""Noise schedules, forward noising, reverse sampling, and the noise/score map."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .nn import NumericError

BETA_MIN = 0.1
BETA_MAX = 10.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances of the forward chain, with cumulative products.

    `alpha_bar_prev[t-1]` is the cumulative product one step earlier, with the
    empty-product convention at t=1.
    """

    T: int
    betas: np.ndarray        # beta_t, index t-1
    alphas: np.ndarray       # 1 - beta_t
    alpha_bars: np.ndarray   # prod_{s<=t} alpha_s
    noise_scale: np.ndarray  # sqrt(1 - alpha_bar_t)

    @cached_property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    def check_t(self, t: int) -> None:
        if not (1 <= t <= self.T):
            raise ValueError(f"diffusion step {t} outside [1, {self.T}]")


def make_vp_schedule(T: int, beta_min: float = BETA_MIN, beta_max: float = BETA_MAX) -> NoiseSchedule:
    """Discretized variance-preserving schedule:
    beta_t = 1 - exp(-beta_min/T - (beta_max - beta_min)(2t - 1) / (2 T^2)).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    t = np.arange(1, T + 1, dtype=np.float64)
    betas = 1.0 - np.exp(-beta_min / T - (beta_max - beta_min) * (2 * t - 1) / (2 * T * T))
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars,
        noise_scale=np.sqrt(1.0 - alpha_bars),
    )


@dataclass(frozen=True)
class NoisySample:
    x_t: np.ndarray
    t: int
    eps: np.ndarray


def forward_noise(a: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> NoisySample:
    """x_t = sqrt(abar_t) a + sqrt(1 - abar_t) eps."""
    schedule.check_t(t)
    a = np.asarray(a, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    abar = schedule.alpha_bars[t - 1]
    x_t = np.sqrt(abar) * a + np.sqrt(1.0 - abar) * eps
    return NoisySample(x_t=x_t, t=t, eps=eps)


def forward_noise_batch(a: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Vectorized forward noising with a per-row step index."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError("diffusion step index out of range")
    abar = schedule.alpha_bars[t - 1][:, None]
    return np.sqrt(abar) * a + np.sqrt(1.0 - abar) * eps


def score_from_noise(eps_hat: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Noise-to-score conversion: score = -eps_hat / sqrt(1 - abar_t)."""
    schedule.check_t(t)
    return -np.asarray(eps_hat, dtype=np.float64) / schedule.noise_scale[t - 1]


def denoise_sample(
    noise_predictor: Callable[[np.ndarray, np.ndarray, int], np.ndarray],
    s: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    action_dim: int,
    n: int = 1,
    action_low: float | np.ndarray = -1.0,
    action_high: float | np.ndarray = 1.0,
) -> np.ndarray:
    """Ancestral sampling of `n` actions conditioned on state(s) `s`.

    `s` may be a single state vector (shared across the n samples) or an
    (n, state_dim) batch. The last reverse step adds no noise; the final
    sample is clipped to the action box.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if s.shape[0] == 1 and n > 1:
        s = np.broadcast_to(s, (n, s.shape[1]))
    x = rng.standard_normal((n, action_dim))
    for t in range(schedule.T, 0, -1):
        beta = schedule.betas[t - 1]
        alpha = schedule.alphas[t - 1]
        abar = schedule.alpha_bars[t - 1]
        abar_prev = schedule.alpha_bar_prev[t - 1]
        eps_hat = np.asarray(noise_predictor(x, s, t), dtype=np.float64)
        if not np.all(np.isfinite(eps_hat)):
            raise NumericError(f"non-finite noise prediction at reverse step t={t}")
        x = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            var = beta * (1.0 - abar_prev) / (1.0 - abar)
            x = x + np.sqrt(var) * rng.standard_normal(x.shape)
    return np.clip(x, action_low, action_high)
