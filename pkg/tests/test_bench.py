"""Step-timing comparison of the guidance modes."""

import pytest

from dac import bench, data
from dac.trainer import TrainConfig


def _fast_base():
    return TrainConfig(steps=100, batch_size=16, hidden_dim=8, n_hidden=2,
                       ensemble_size=3, metrics_period=10**9,
                       checkpoint_period=10**9)


def test_bench_guidance_single_row():
    ds = data.generate_bandit_dataset(data.BanditSpec(n=40, seed=0))
    rows = bench.bench_guidance(t_values=(3,), reps=2, base=_fast_base(), dataset=ds)
    assert len(rows) == 1
    row = rows[0]
    assert row["T"] == 3
    assert row["soft_s"] > 0 and row["denoised_s"] > 0
    assert row["ratio"] == pytest.approx(row["soft_s"] / row["denoised_s"])


def test_bench_guidance_rejects_empty():
    with pytest.raises(ValueError):
        bench.bench_guidance(t_values=(), reps=1)


def test_bench_guidance_soft_faster_at_moderate_horizon():
    ds = data.generate_bandit_dataset(data.BanditSpec(n=40, seed=0))
    rows = bench.bench_guidance(t_values=(10,), reps=3, base=_fast_base(), dataset=ds)
    assert rows[0]["ratio"] < 1.0
