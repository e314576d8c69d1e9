"""Wall-clock comparison of guidance modes across diffusion horizons."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .data import BanditSpec, OfflineDataset, generate_bandit_dataset
from .trainer import TrainConfig, init_state, train_step


def _time_steps(config: TrainConfig, dataset: OfflineDataset, reps: int,
                chunks: int = 3) -> float:
    """Best-of-chunks mean step time; the minimum suppresses load spikes."""
    state = init_state(config, dataset)
    for _ in range(2):
        state, _ = train_step(state, dataset, with_metrics=False)
    best = np.inf
    for _ in range(chunks):
        t0 = time.perf_counter()
        for _ in range(reps):
            state, _ = train_step(state, dataset, with_metrics=False)
        best = min(best, (time.perf_counter() - t0) / reps)
    return best


def bench_guidance(t_values=(5, 10, 20, 50, 100), reps: int = 15,
                   base: TrainConfig | None = None,
                   dataset: OfflineDataset | None = None) -> list:
    """Per-step wall time of a full update under soft vs denoised guidance.

    Returns one row per horizon: dict(T, soft_s, denoised_s, ratio).
    The denoised update backpropagates through all T reverse steps, so the
    ratio soft/denoised shrinks as T grows.
    """
    if not t_values:
        raise ValueError("need at least one diffusion horizon")
    if dataset is None:
        dataset = generate_bandit_dataset(BanditSpec())
    if base is None:
        base = TrainConfig(steps=100, batch_size=128, hidden_dim=32, n_hidden=2,
                           ensemble_size=10, metrics_period=10**9,
                           checkpoint_period=10**9)
    rows = []
    for t in t_values:
        soft = _time_steps(replace(base, diffusion_steps=int(t), guidance="soft"),
                           dataset, reps)
        denoised = _time_steps(replace(base, diffusion_steps=int(t), guidance="denoised"),
                               dataset, reps)
        rows.append({"T": int(t), "soft_s": soft, "denoised_s": denoised,
                     "ratio": soft / denoised})
    return rows
