"""Diffusion policy: noise network, guidance losses, eta control, analytic oracles."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import nn
from .data import LqOracle
from .diffusion import NoiseSchedule, denoise_sample, forward_noise_batch
from .nn import MlpParams

TIME_EMBED_DIM = 16

GUIDANCE_MODES = ("soft", "hard", "denoised")


def time_embedding(t, T: int) -> np.ndarray:
    """Sinusoidal embedding of t/T, dimension 16; injective over {1..T}."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise ValueError(f"diffusion step {t} outside [1, {T}]")
    half = TIME_EMBED_DIM // 2
    freqs = np.pi * (max(T, 2) ** (np.arange(half) / (half - 1)))
    angles = (t_arr[..., None] / T) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


@lru_cache(maxsize=512)
def _time_embedding_rows(t: int, n: int, T: int) -> np.ndarray:
    out = time_embedding(np.full(n, t, dtype=np.float64), T)
    out.setflags(write=False)
    return out


def _time_embedding_for(t, n: int, T: int) -> np.ndarray:
    if isinstance(t, (int, np.integer)):
        return _time_embedding_rows(int(t), n, T)
    return time_embedding(np.broadcast_to(np.asarray(t), (n,)), T)


@dataclass(frozen=True)
class PolicyParams:
    """Noise-network weights: a time-embedding layer plus the main MLP."""

    time_layer: Tuple[np.ndarray, np.ndarray]  # (16, 16) affine + Mish
    net: MlpParams

    def tree(self):
        return [tuple(self.time_layer)] + nn.tree_layers(self.net)

    def with_tree(self, tree) -> "PolicyParams":
        return PolicyParams(time_layer=tuple(tree[0]), net=nn.with_layers(self.net, tree[1:]))


def init_policy_params(state_dim: int, action_dim: int, rng: np.random.Generator,
                       hidden_dim: int = 256, n_hidden: int = 3) -> PolicyParams:
    bound = 1.0 / np.sqrt(TIME_EMBED_DIM)
    time_w = rng.uniform(-bound, bound, size=(TIME_EMBED_DIM, TIME_EMBED_DIM))
    net = nn.init_mlp(action_dim + state_dim + TIME_EMBED_DIM, action_dim, rng,
                      hidden_dim, n_hidden)
    return PolicyParams(time_layer=(time_w, np.zeros(TIME_EMBED_DIM)), net=net)


@dataclass(frozen=True)
class DiffusionPolicy:
    """Conditional noise predictor with an EMA twin used for action sampling."""

    params: PolicyParams
    ema: PolicyParams
    schedule: NoiseSchedule
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray


def init_policy(state_dim: int, action_dim: int, schedule: NoiseSchedule,
                rng: np.random.Generator, hidden_dim: int = 256, n_hidden: int = 3,
                action_low=-1.0, action_high=1.0) -> DiffusionPolicy:
    params = init_policy_params(state_dim, action_dim, rng, hidden_dim, n_hidden)
    return DiffusionPolicy(
        params=params, ema=params, schedule=schedule,
        state_dim=state_dim, action_dim=action_dim,
        action_low=np.broadcast_to(np.asarray(action_low, dtype=np.float64), (action_dim,)).copy(),
        action_high=np.broadcast_to(np.asarray(action_high, dtype=np.float64), (action_dim,)).copy(),
    )


def predict_noise(params: PolicyParams, x: np.ndarray, s: np.ndarray, t,
                  T: int) -> np.ndarray:
    """Fast (graph-free) noise prediction; t may be a scalar or per-row array."""
    x = np.atleast_2d(x)
    s = np.atleast_2d(s)
    emb = _time_embedding_for(t, x.shape[0], T)
    tw, tb = params.time_layer
    emb = ad._mish(emb @ tw.T + tb)
    inp = np.concatenate([x, s, emb], axis=-1)
    return nn.mlp_forward(params.net, inp)


def predict_noise_graph(nodes, x, s: np.ndarray, t, T: int, activation: str = "mish"):
    """Graph-building twin of predict_noise. `nodes` is a PolicyParams tree of
    Nodes (or arrays, for frozen networks); `x` may be a Node."""
    xv = x.value if isinstance(x, ad.Node) else np.atleast_2d(x)
    emb_raw = _time_embedding_for(t, xv.shape[0], T)
    tw, tb = nodes[0]
    emb = ad.affine_mish(emb_raw, tw, tb)
    inp = ad.concat([x if isinstance(x, ad.Node) else np.atleast_2d(x),
                     np.atleast_2d(s), emb], axis=-1)
    return nn.mlp_forward_graph(nodes[1:], inp, activation)


def sampler_from(params: PolicyParams, policy: DiffusionPolicy):
    """Returns eps_hat(x, s, t) usable by the reverse sampler."""
    T = policy.schedule.T

    def predictor(x, s, t):
        return predict_noise(params, x, s, t, T)

    return predictor


def sample_actions(policy: DiffusionPolicy, s: np.ndarray, n: int,
                   rng: np.random.Generator, use_ema: bool = True) -> np.ndarray:
    """Draw n actions for a single state (or per-row for an (n, sdim) batch)."""
    params = policy.ema if use_ema else policy.params
    return denoise_sample(
        sampler_from(params, policy), s, policy.schedule, rng,
        action_dim=policy.action_dim, n=n,
        action_low=policy.action_low, action_high=policy.action_high,
    )


def sample_actions_batched(policy: DiffusionPolicy, states: np.ndarray, m: int,
                           rng: np.random.Generator, use_ema: bool = True) -> np.ndarray:
    """M draws per state: returns (M, B, action_dim)."""
    states = np.atleast_2d(states)
    b = states.shape[0]
    rep = np.repeat(states, m, axis=0)  # rows grouped by state
    flat = sample_actions(policy, rep, rep.shape[0], rng, use_ema)
    return flat.reshape(b, m, -1).swapaxes(0, 1)


# -- guidance targets and losses --------------------------------------------

def target_noise_soft(eps: np.ndarray, t, qgrad: np.ndarray, eta: float,
                      schedule: NoiseSchedule) -> np.ndarray:
    """Regression target eps - (1/eta) sqrt(1 - abar_t) qgrad."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    scale = schedule.noise_scale[np.asarray(t) - 1]
    return eps - (np.asarray(scale)[..., None] / eta) * np.asarray(qgrad)


@dataclass(frozen=True)
class ActorLossParts:
    total: float
    bc: float          # mean ||eps_hat - eps||^2
    guidance: float    # mean guidance term as it enters the loss


def _denoised_graph(nodes, policy: DiffusionPolicy, states: np.ndarray,
                    ensemble, rng: np.random.Generator,
                    n_chains: Optional[int] = None):
    """Denoising rollout with gradients flowing through every reverse step,
    followed by the normalized ensemble-mean value of the final action.

    `n_chains` caps the number of rollouts used for the value expectation
    (default: one per batch row); the estimate stays unbiased, only noisier.
    """
    sched = policy.schedule
    b = states.shape[0]
    if n_chains is not None and n_chains < b:
        states = states[rng.choice(b, size=n_chains, replace=False)]
        b = n_chains
    x = rng.standard_normal((b, policy.action_dim))
    for t in range(sched.T, 0, -1):
        beta = sched.betas[t - 1]
        alpha = sched.alphas[t - 1]
        abar = sched.alpha_bars[t - 1]
        abar_prev = sched.alpha_bar_prev[t - 1]
        eps_hat = predict_noise_graph(nodes, x, states, t, sched.T)
        inv = 1.0 / np.sqrt(alpha)
        shift = 0.0
        if t > 1:
            var = beta * (1.0 - abar_prev) / (1.0 - abar)
            shift = np.sqrt(var) * rng.standard_normal((b, policy.action_dim))
        x = ad.lincomb(x, eps_hat, inv, -inv * beta / np.sqrt(1.0 - abar), shift)
    x = ad.clip(x, policy.action_low, policy.action_high)
    inp = ad.concat([states, x], axis=-1)
    q = nn.mlp_forward_graph(list(ensemble.targets.layers), inp,
                             ensemble.targets.activation)  # (H, B, 1)
    return ad.nmean(q)


def _forward_policy_cached(tree, x: np.ndarray, s: np.ndarray, emb_raw: np.ndarray):
    """Forward pass of the noise network on plain arrays, keeping the
    activation caches needed for a hand-rolled backward pass."""
    tw, tb = tree[0]
    pre_t = emb_raw @ tw.T + tb
    emb, t_tsp, t_sig = ad._mish_parts(pre_t)
    inp = np.concatenate([x, s, emb], axis=-1)
    layers = tree[1:]
    caches = []
    h = inp
    n = len(layers)
    for k, (w, b) in enumerate(layers):
        pre = h @ w.T + b
        if k < n - 1:
            out, tsp, sig = ad._mish_parts(pre)
            caches.append((h, pre, tsp, sig))
            h = out
        else:
            caches.append((h, None, None, None))
            h = pre
    return h, (pre_t, t_tsp, t_sig), caches


def _backward_policy_cached(tree, grads, g_out: np.ndarray, tcache, caches,
                            emb_raw: np.ndarray, action_dim: int, state_dim: int):
    """Backward pass matching _forward_policy_cached: accumulates parameter
    gradients into `grads` (tree-shaped lists) and returns the gradient with
    respect to the x part of the input."""
    layers = tree[1:]
    g = g_out
    for k in reversed(range(len(layers))):
        h_in, pre, tsp, sig = caches[k]
        gpre = g if pre is None else g * (tsp + pre * (1.0 - tsp * tsp) * sig)
        gw, gb = grads[k + 1]
        gw += gpre.T @ h_in
        gb += gpre.sum(axis=0)
        g = gpre @ layers[k][0]
    gx = g[:, :action_dim]
    g_emb = g[:, action_dim + state_dim:]
    pre_t, t_tsp, t_sig = tcache
    gpre_t = g_emb * (t_tsp + pre_t * (1.0 - t_tsp * t_tsp) * t_sig)
    gtw, gtb = grads[0]
    gtw += gpre_t.T @ emb_raw
    gtb += gpre_t.sum(axis=0)
    return gx


def _denoised_value_grads(tree, policy: DiffusionPolicy, states: np.ndarray,
                          ensemble, rng: np.random.Generator,
                          n_chains: Optional[int] = None):
    """Normalized ensemble-mean value of fully denoised samples, with the
    gradient with respect to the policy parameters backpropagated through
    every reverse step (hand-rolled; equals the tape version exactly).

    Returns (value, gradient tree).
    """
    from .critic import mlp_input_grad

    sched = policy.schedule
    b = states.shape[0]
    if n_chains is not None and n_chains < b:
        states = states[rng.choice(b, size=n_chains, replace=False)]
        b = n_chains
    d = policy.action_dim
    x = rng.standard_normal((b, d))
    steps = []
    for t in range(sched.T, 0, -1):
        beta = sched.betas[t - 1]
        abar = sched.alpha_bars[t - 1]
        abar_prev = sched.alpha_bar_prev[t - 1]
        emb_raw = _time_embedding_for(t, b, sched.T)
        eps_hat, tcache, caches = _forward_policy_cached(tree, x, states, emb_raw)
        inv = 1.0 / np.sqrt(sched.alphas[t - 1])
        ce = -inv * beta / np.sqrt(1.0 - abar)
        if t > 1:
            var = beta * (1.0 - abar_prev) / (1.0 - abar)
            shift = np.sqrt(var) * rng.standard_normal((b, d))
        else:
            shift = 0.0
        steps.append((inv, ce, emb_raw, tcache, caches))
        x = inv * x + ce * eps_hat + shift
    x0 = np.clip(x, policy.action_low, policy.action_high)
    mask = ((x >= policy.action_low) & (x <= policy.action_high)).astype(np.float64)

    inp_q = np.concatenate([states, x0], axis=-1)
    q = nn.mlp_forward(ensemble.targets, inp_q)  # (H, B, 1)
    value = float(q.mean())
    g_full = mlp_input_grad(ensemble.targets, inp_q)
    g = g_full[..., states.shape[-1]:].sum(axis=0) / q.size
    g = g * mask

    grads = [tuple(np.zeros_like(p) for p in layer) for layer in tree]
    state_dim = states.shape[-1]
    for inv, ce, emb_raw, tcache, caches in reversed(steps):
        gx = _backward_policy_cached(tree, grads, ce * g, tcache, caches,
                                     emb_raw, d, state_dim)
        g = inv * g + gx
    return value, grads


def actor_loss_and_grads(
    policy: DiffusionPolicy,
    batch_states: np.ndarray,
    batch_actions: np.ndarray,
    mode: str,
    eta: float,
    ensemble,
    rng: np.random.Generator,
    denoised_chains: Optional[int] = None,
):
    """One actor loss evaluation with parameter gradients.

    Draws (eps, t) internally, forms x_t, and applies the requested guidance:
      soft:     eta * BC + sqrt(1 - abar_t) <eps_hat, qgrad>
      hard:     eta * BC + <eps_hat, qgrad>
      denoised: eta * BC - mean normalized Q at fresh denoised samples, with
                gradients through the denoising path (minimizing raises value).
    qgrad is held constant with respect to the network parameters.
    """
    if mode not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {mode!r}")
    if eta <= 0:
        raise ValueError("eta must be positive")
    sched = policy.schedule
    b, d = batch_actions.shape
    eps = rng.standard_normal((b, d))
    t = rng.integers(1, sched.T + 1, size=b)
    x_t = forward_noise_batch(batch_actions, t, eps, sched)

    nodes = [tuple(ad.Node(p) for p in layer) for layer in policy.params.tree()]
    eps_hat = predict_noise_graph(nodes, x_t, batch_states, t, sched.T)
    resid = ad.sub(eps_hat, eps)
    bc = ad.nmean(ad.nsum(ad.square(resid), axis=-1))

    if mode in ("soft", "hard"):
        from .critic import q_gradient
        qgrad = q_gradient(ensemble, batch_states, x_t)
        if mode == "soft":
            weighted = sched.noise_scale[t - 1][:, None] * qgrad
        else:
            weighted = qgrad
        guide = ad.nmean(ad.nsum(ad.mul(eps_hat, weighted), axis=-1))
        total = ad.add(ad.mul(bc, eta), guide)
        total.backward()
        grads = [tuple(p.grad for p in layer) for layer in nodes]
        parts = ActorLossParts(total=float(total.value), bc=float(bc.value),
                               guidance=float(guide.value))
        return parts, grads

    if ensemble.scale_c is None:
        raise ValueError("scale constant C has not been estimated yet")
    q_value, q_grads = _denoised_value_grads(
        policy.params.tree(), policy, batch_states, ensemble, rng,
        n_chains=denoised_chains)
    guide_value = -q_value / ensemble.scale_c
    ad.mul(bc, eta).backward()
    scale = -1.0 / ensemble.scale_c
    grads = [tuple(p.grad + scale * qg for p, qg in zip(nlayer, qlayer))
             for nlayer, qlayer in zip(nodes, q_grads)]
    parts = ActorLossParts(total=eta * float(bc.value) + guide_value,
                           bc=float(bc.value), guidance=guide_value)
    return parts, grads


def actor_loss(policy, batch_states, batch_actions, mode, eta, ensemble,
               rng) -> ActorLossParts:
    parts, _ = actor_loss_and_grads(policy, batch_states, batch_actions, mode,
                                    eta, ensemble, rng)
    return parts


# -- analytic oracles for the LQ environment --------------------------------

def analytic_target_noise(x_t: np.ndarray, t: int, oracle: LqOracle, eta: float,
                          schedule: NoiseSchedule) -> np.ndarray:
    """Noise predictor of the diffusion model whose samples follow the
    constrained optimum: the optimum's Gaussian convolved with the step-t
    noising kernel has mean sqrt(abar) mu* and covariance abar S* + (1-abar) I.
    """
    schedule.check_t(t)
    mu_star, sigma_star = oracle.optimum(eta)
    abar = schedule.alpha_bars[t - 1]
    cov = abar * sigma_star + (1.0 - abar) * np.eye(len(mu_star))
    diff = np.atleast_2d(x_t) - np.sqrt(abar) * mu_star
    score = -np.linalg.solve(cov, diff.T).T
    out = -schedule.noise_scale[t - 1] * score
    return out if np.asarray(x_t).ndim > 1 else out[0]


def behavior_guided_target_noise(x_t: np.ndarray, t: int, oracle: LqOracle,
                                 eta: float, schedule: NoiseSchedule) -> np.ndarray:
    """Noise target assembled from the behavior noisy-marginal score plus the
    (1/eta)-scaled reward gradient, both in closed form.

    This is the target whose regression is exactly equivalent (in expectation
    over behavior draws) to the guided noise-regression loss.
    """
    schedule.check_t(t)
    abar = schedule.alpha_bars[t - 1]
    cov_b = abar * oracle.sigma_b + (1.0 - abar) * np.eye(oracle.action_dim)
    x2 = np.atleast_2d(x_t)
    diff = x2 - np.sqrt(abar) * oracle.mu_b
    score_b = -np.linalg.solve(cov_b, diff.T).T
    combined = score_b + oracle.reward_grad(x2) / eta
    out = -schedule.noise_scale[t - 1] * combined
    return out if np.asarray(x_t).ndim > 1 else out[0]


# -- Lagrangian multiplier control ------------------------------------------

@dataclass(frozen=True)
class EtaController:
    eta: float
    mode: str = "constant"   # constant | learnable
    b: float = 1.0           # behavior-cloning threshold
    alpha: float = 1e-3
    floor: float = 1e-4

    def __post_init__(self):
        if self.mode not in ("constant", "learnable"):
            raise ValueError(f"unknown eta mode {self.mode!r}")
        if self.eta < self.floor or self.floor <= 0:
            raise ValueError("eta must satisfy eta >= floor > 0")
        if self.b <= 0:
            raise ValueError("threshold b must be positive")


def eta_step(ctrl: EtaController, bc_loss: float) -> EtaController:
    """Dual ascent: eta' = max(floor, eta + alpha (bc_loss - b))."""
    if ctrl.mode != "learnable":
        raise ValueError("eta_step requires a learnable controller")
    return replace(ctrl, eta=max(ctrl.floor, ctrl.eta + ctrl.alpha * (bc_loss - ctrl.b)))
