"""Bandit diagnostics: behavior scatter, critic level curves, extracted actions.

The CSV emitted next to each figure is the contract; the vector image is a
convenience rendering of the same numbers.
"""

from __future__ import annotations

import csv

import numpy as np

from . import critic as critic_mod
from . import evaluation as ev
from .data import OfflineDataset


def panel_data(state, dataset: OfflineDataset, rng: np.random.Generator,
               n_extract: int = 200, grid_n: int = 61) -> dict:
    """Everything one panel needs: behavior actions with rewards, the ensemble
    mean target Q on an action grid, and extracted policy samples."""
    lo = float(dataset.action_low.min())
    hi = float(dataset.action_high.max())
    axis = np.linspace(lo, hi, grid_n)
    gx, gy = np.meshgrid(axis, axis)
    grid_actions = np.stack([gx.ravel(), gy.ravel()], axis=1)
    s = np.zeros(dataset.state_dim)
    s_rep = np.broadcast_to(s, (len(grid_actions), dataset.state_dim))
    q = critic_mod.ensemble_mean_q(state.ensemble, s_rep, grid_actions)
    cfg = ev.ExtractionConfig(n_actions=state.config.n_action_samples)
    extracted = ev.extract_actions(n_extract, s, state.policy, state.ensemble, cfg, rng)
    return {
        "behavior": dataset.actions,
        "behavior_rewards": dataset.rewards,
        "grid_axis": axis,
        "q_grid": q.reshape(grid_n, grid_n),
        "extracted": extracted,
    }


def write_panel_csv(data: dict, path: str) -> None:
    """One flat CSV per panel: tagged rows for each of the three point sets."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "x", "y", "value"])
        for (x, y), r in zip(data["behavior"], data["behavior_rewards"]):
            w.writerow(["behavior", repr(float(x)), repr(float(y)), repr(float(r))])
        axis = data["grid_axis"]
        q = data["q_grid"]
        for i, gy in enumerate(axis):
            for j, gx in enumerate(axis):
                w.writerow(["q_grid", repr(float(gx)), repr(float(gy)), repr(float(q[i, j]))])
        for x, y in data["extracted"]:
            w.writerow(["extracted", repr(float(x)), repr(float(y)), ""])


def read_panel_csv(path: str) -> dict:
    rows = {"behavior": [], "q_grid": [], "extracted": []}
    values = {"behavior": [], "q_grid": []}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows[row["kind"]].append((float(row["x"]), float(row["y"])))
            if row["kind"] in values:
                values[row["kind"]].append(float(row["value"]))
    axis = np.unique([x for x, _ in rows["q_grid"]])
    n = len(axis)
    return {
        "behavior": np.array(rows["behavior"]),
        "behavior_rewards": np.array(values["behavior"]),
        "grid_axis": axis,
        "q_grid": np.array(values["q_grid"]).reshape(n, n) if n else np.zeros((0, 0)),
        "extracted": np.array(rows["extracted"]),
    }


def render_panels(panels: list, labels: list, path: str) -> None:
    """Side-by-side panels in one vector image (format from the file suffix)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 4.0), squeeze=False)
    for ax, data, label in zip(axes[0], panels, labels):
        axis = data["grid_axis"]
        if data["q_grid"].size:
            ax.contour(axis, axis, data["q_grid"], levels=12,
                       colors="gray", linewidths=0.6, alpha=0.7)
        beh = data["behavior"]
        sc = ax.scatter(beh[:, 0], beh[:, 1], c=data["behavior_rewards"],
                        cmap="viridis", s=8, alpha=0.6, label="behavior")
        ext = data["extracted"]
        if len(ext):
            ax.scatter(ext[:, 0], ext[:, 1], color="crimson", marker="x",
                       s=18, linewidths=0.9, label="extracted")
        ax.set_title(label)
        ax.set_aspect("equal")
        ax.legend(loc="lower left", fontsize=7)
        fig.colorbar(sc, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
