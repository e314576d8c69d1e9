"""Q-ensemble with EMA targets, LCB value targets, and normalized Q-gradients.

All H members are stored as stacked arrays (leading ensemble axis), so one
batched matmul evaluates the whole ensemble. Per-member losses remain
block-separable: summing them reproduces Algorithm-style member-wise updates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .data import Batch, OfflineDataset, sample_batch
from .nn import MlpParams, NumericError

C_FLOOR = 1e-6


@dataclass(frozen=True)
class ValueTargetMode:
    """How the M sampled next actions are aggregated per member."""

    aggregate: str = "mean"  # mean | max
    m_samples: int = 10

    def __post_init__(self):
        if self.aggregate not in ("mean", "max"):
            raise ValueError(f"unknown aggregation {self.aggregate!r}")
        if self.m_samples < 1:
            raise ValueError("m_samples must be >= 1")


@dataclass(frozen=True)
class CriticEnsemble:
    """H Q-networks plus EMA twins; parameters carry a leading ensemble axis."""

    members: MlpParams       # stacked: weights (H, out, in), biases (H, out)
    targets: MlpParams
    rho: float
    gamma: float
    scale_c: float | None = None
    pessimism: str = "lcb"   # lcb | min (ensemble-minimum ablation)
    lcb_before_aggregation: bool = False

    @property
    def size(self) -> int:
        return self.members.layers[0][0].shape[0]

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("pessimism factor must be >= 0")
        if self.pessimism not in ("lcb", "min"):
            raise ValueError(f"unknown pessimism rule {self.pessimism!r}")
        for (wm, _), (wt, _) in zip(self.members.layers, self.targets.layers):
            if wm.shape != wt.shape:
                raise nn.ShapeError("member and target architectures must be congruent")


def init_ensemble(
    h: int,
    state_dim: int,
    action_dim: int,
    rng: np.random.Generator,
    rho: float,
    gamma: float,
    hidden_dim: int = 256,
    n_hidden: int = 3,
    pessimism: str = "lcb",
    lcb_before_aggregation: bool = False,
) -> CriticEnsemble:
    """H members with distinct initializations drawn from one rng stream."""
    nets = [nn.init_mlp(state_dim + action_dim, 1, rng, hidden_dim, n_hidden) for _ in range(h)]
    layers = tuple(
        (np.stack([m.layers[k][0] for m in nets]), np.stack([m.layers[k][1] for m in nets]))
        for k in range(len(nets[0].layers))
    )
    stacked = MlpParams(layers=layers, activation="mish",
                        input_dim=state_dim + action_dim, output_dim=1, hidden_dim=hidden_dim)
    return CriticEnsemble(members=stacked, targets=stacked, rho=rho, gamma=gamma,
                          pessimism=pessimism, lcb_before_aggregation=lcb_before_aggregation)


def lcb(values: np.ndarray, rho: float, axis: int = 0) -> np.ndarray:
    """Ensemble mean minus rho times the population standard deviation."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[axis] == 0:
        raise ValueError("lcb needs at least one ensemble value")
    if rho < 0:
        raise ValueError("rho must be >= 0")
    return values.mean(axis=axis) - rho * values.std(axis=axis)


def member_q_values(params: MlpParams, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Q_h(s, a) for every member: returns (H, B)."""
    x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=-1)
    return nn.mlp_forward(params, x)[..., 0]


def ensemble_mean_q(ensemble: CriticEnsemble, s: np.ndarray, a: np.ndarray,
                    use_targets: bool = True) -> np.ndarray:
    params = ensemble.targets if use_targets else ensemble.members
    return member_q_values(params, s, a).mean(axis=0)


def estimate_scale_c(ensemble: CriticEnsemble, dataset: OfflineDataset,
                     sample_size: int, rng: np.random.Generator) -> float:
    """C = mean |Q_target| over a uniform draw of in-dataset (s, a), floored."""
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    batch = sample_batch(dataset, min(sample_size, max(len(dataset), 1)), rng)
    q = member_q_values(ensemble.targets, batch.states, batch.actions)
    return max(float(np.abs(q).mean()), C_FLOOR)


def mlp_input_grad(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Gradient of sum(outputs) with respect to the input rows.

    Hand-rolled backward pass (the parameters need no gradients here), so it
    avoids the graph tape entirely; exact, not approximate.
    """
    layers = params.layers
    caches = []
    h = x
    for w, b in layers[:-1]:
        pre = np.matmul(h, np.swapaxes(w, -1, -2)) + (b if b.ndim == 1 else b[..., None, :])
        if params.activation == "mish":
            h, tsp, sig = ad._mish_parts(pre)
            caches.append((pre, tsp, sig))
        else:
            h = pre
            caches.append(None)
    w_last, _ = layers[-1]
    # d sum(out) / d h_last is the column-sum of the last weight matrix
    g = np.broadcast_to(w_last.sum(axis=-2, keepdims=True),
                        h.shape[:-1] + (w_last.shape[-1],))
    for (w, _), cache in zip(reversed(layers[:-1]), reversed(caches)):
        if cache is not None:
            pre, tsp, sig = cache
            g = g * (tsp + pre * (1.0 - tsp * tsp) * sig)
        g = np.matmul(g, w)
    return g


def q_gradient(ensemble: CriticEnsemble, s: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(1/(H C)) sum_h grad_x Q_target_h(s, x); x may lie outside the action box."""
    if ensemble.scale_c is None:
        raise ValueError("scale constant C has not been estimated yet")
    s2, x2 = np.atleast_2d(s), np.atleast_2d(x)
    inp = np.concatenate([s2, x2], axis=-1)
    full = mlp_input_grad(ensemble.targets, inp)         # (H, B, s+a)
    g = full[..., s2.shape[-1]:].sum(axis=0) / (ensemble.size * ensemble.scale_c)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite Q-gradient")
    return g if np.asarray(x).ndim > 1 else g[0]


def aggregate_next_values(ensemble: CriticEnsemble, q_next: np.ndarray,
                          mode: ValueTargetMode) -> np.ndarray:
    """Collapse (H, M, B) member values over samples and members into V(s') (B,).

    Default order: aggregate the M draws within each member, then apply the
    pessimism rule across members. The flipped order is available behind
    `lcb_before_aggregation`.
    """
    if ensemble.lcb_before_aggregation:
        if ensemble.pessimism == "min":
            per_draw = q_next.min(axis=0)              # (M, B)
        else:
            per_draw = lcb(q_next, ensemble.rho, axis=0)
        return per_draw.mean(axis=0) if mode.aggregate == "mean" else per_draw.max(axis=0)
    per_member = q_next.mean(axis=1) if mode.aggregate == "mean" else q_next.max(axis=1)
    if ensemble.pessimism == "min":
        return per_member.min(axis=0)
    return lcb(per_member, ensemble.rho, axis=0)


def value_target(
    s_next: np.ndarray,
    sample_actions: Callable[[np.ndarray, int, np.random.Generator], np.ndarray],
    ensemble: CriticEnsemble,
    mode: ValueTargetMode,
    rng: np.random.Generator,
) -> np.ndarray:
    """V(s') from M actions drawn by the target policy sampler.

    `sample_actions(states, m, rng)` must return an (M, B, action_dim) array.
    """
    s_next = np.atleast_2d(s_next)
    b = s_next.shape[0]
    actions = sample_actions(s_next, mode.m_samples, rng)  # (M, B, d)
    s_rep = np.broadcast_to(s_next, (mode.m_samples,) + s_next.shape).reshape(mode.m_samples * b, -1)
    q = member_q_values(ensemble.targets, s_rep, actions.reshape(mode.m_samples * b, -1))
    q = q.reshape(ensemble.size, mode.m_samples, b)
    return aggregate_next_values(ensemble, q, mode)


def bellman_targets(ensemble: CriticEnsemble, batch: Batch,
                    v_next: np.ndarray | None) -> np.ndarray:
    """y = r + gamma (1 - terminal) V(s'). `v_next` may be None when the whole
    batch is terminal."""
    mask = 1.0 - batch.terminals.astype(np.float64)
    if v_next is None:
        if np.any(mask):
            raise ValueError("non-terminal transitions need a next-state value")
        return batch.rewards.astype(np.float64)
    return batch.rewards + ensemble.gamma * mask * v_next


def critic_loss(member: int, batch: Batch, v_next: np.ndarray | None,
                ensemble: CriticEnsemble) -> float:
    """Mean squared Bellman error of one member (diagnostic / test surface)."""
    y = bellman_targets(ensemble, batch, v_next)
    q = member_q_values(ensemble.members, batch.states, batch.actions)[member]
    return float(np.mean((y - q) ** 2))


def critic_update(ensemble: CriticEnsemble, batch: Batch, v_next: np.ndarray | None,
                  opt_state: nn.AdamState, lr: float):
    """One Adam step on all H members (block-separable summed loss).

    Returns (ensemble', opt_state', per_member_losses).
    """
    y = bellman_targets(ensemble, batch, v_next)
    nodes = nn.as_nodes(ensemble.members)
    x = np.concatenate([batch.states, batch.actions], axis=-1)
    q = nn.mlp_forward_graph(nodes, x, ensemble.members.activation)  # (H, B, 1)
    resid = ad.sub(q, y[None, :, None])
    per_member = ad.nmean(ad.nmean(ad.square(resid), axis=-1), axis=-1)  # (H,)
    ad.nsum(per_member).backward()
    grads = [(w.grad, b.grad) for w, b in nodes]
    new_tree, opt_state = nn.adam_step(nn.tree_layers(ensemble.members), grads, opt_state, lr)
    return (
        replace(ensemble, members=nn.with_layers(ensemble.members, new_tree)),
        opt_state,
        per_member.value,
    )


def ema_update_targets(ensemble: CriticEnsemble, alpha: float) -> CriticEnsemble:
    return replace(ensemble, targets=nn.ema_update_params(ensemble.targets, ensemble.members, alpha))
