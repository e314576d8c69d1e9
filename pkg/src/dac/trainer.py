"""Interleaved critic/actor training loop with EMA targets, checkpoints, metrics."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import actor as actor_mod
from . import critic as critic_mod
from . import nn
from .actor import DiffusionPolicy, EtaController, PolicyParams
from .critic import CriticEnsemble, ValueTargetMode
from .data import OfflineDataset, sample_batch
from .diffusion import make_vp_schedule
from . import diffusion

METRICS_HEADER = "step,actor_loss,bc_loss,guidance_term,critic_loss_mean,q_mean,q_lcb_gap,eta,C,lr"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    alpha_ema: float = 5e-3
    actor_target_period: int = 5
    diffusion_steps: int = 5
    beta_min: float = diffusion.BETA_MIN
    beta_max: float = diffusion.BETA_MAX
    ensemble_size: int = 10
    rho: float = 1.0
    gamma: float = 0.99
    pessimism: str = "lcb"
    lcb_before_aggregation: bool = False
    guidance: str = "soft"
    eta_mode: str = "learnable"
    eta_init: float = 1.0
    eta_b: float = 1.0
    eta_alpha: float = 1e-3
    eta_floor: float = 1e-4
    m_samples: int = 10
    value_target_aggregate: str = "mean"
    n_action_samples: int = 10
    hidden_dim: int = 256
    n_hidden: int = 3
    # critic architecture; None means "same as the actor"
    critic_hidden_dim: Optional[int] = None
    critic_n_hidden: Optional[int] = None
    # rollouts per step for the denoised value estimate; None means batch_size
    denoised_chains: Optional[int] = None
    c_refresh_period: int = 1000
    c_sample_size: int = 4096
    metrics_period: int = 100
    checkpoint_period: int = 5000
    seed: int = 0

    def validate(self) -> None:
        bad = []
        positive = ["steps", "batch_size", "lr_actor", "lr_critic", "eta_init",
                    "eta_b", "eta_floor", "hidden_dim", "n_hidden", "m_samples",
                    "n_action_samples", "c_sample_size"]
        for key in positive:
            if getattr(self, key) <= 0 and key != "steps":
                bad.append(key)
        if self.steps < 0:
            bad.append("steps")
        for key in ["actor_target_period", "c_refresh_period", "metrics_period",
                    "checkpoint_period", "diffusion_steps", "ensemble_size"]:
            if getattr(self, key) < 1:
                bad.append(key)
        if not (0.0 <= self.alpha_ema <= 1.0):
            bad.append("alpha_ema")
        if not (0.0 < self.gamma < 1.0):
            bad.append("gamma")
        if self.rho < 0:
            bad.append("rho")
        if self.guidance not in actor_mod.GUIDANCE_MODES:
            bad.append("guidance")
        if self.eta_mode not in ("constant", "learnable"):
            bad.append("eta_mode")
        if self.value_target_aggregate not in ("mean", "max"):
            bad.append("value_target_aggregate")
        if self.pessimism not in ("lcb", "min"):
            bad.append("pessimism")
        for key in ("critic_hidden_dim", "critic_n_hidden", "denoised_chains"):
            value = getattr(self, key)
            if value is not None and value < 1:
                bad.append(key)
        if bad:
            raise ValueError(f"invalid config values for: {', '.join(sorted(set(bad)))}")

    def hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class TrainState:
    config: TrainConfig
    policy: DiffusionPolicy
    ensemble: CriticEnsemble
    actor_opt: nn.AdamState
    critic_opt: nn.AdamState
    eta: EtaController
    step: int
    rng: np.random.Generator


def init_state(config: TrainConfig, dataset: OfflineDataset,
               rng: Optional[np.random.Generator] = None) -> TrainState:
    config.validate()
    ss = np.random.SeedSequence(config.seed)
    policy_seed, critic_seed, train_seed = ss.spawn(3)
    schedule = make_vp_schedule(config.diffusion_steps, config.beta_min, config.beta_max)
    policy = actor_mod.init_policy(
        dataset.state_dim, dataset.action_dim, schedule,
        np.random.default_rng(policy_seed),
        hidden_dim=config.hidden_dim, n_hidden=config.n_hidden,
        action_low=dataset.action_low, action_high=dataset.action_high,
    )
    ensemble = critic_mod.init_ensemble(
        config.ensemble_size, dataset.state_dim, dataset.action_dim,
        np.random.default_rng(critic_seed), rho=config.rho, gamma=config.gamma,
        hidden_dim=config.critic_hidden_dim or config.hidden_dim,
        n_hidden=config.critic_n_hidden or config.n_hidden,
        pessimism=config.pessimism,
        lcb_before_aggregation=config.lcb_before_aggregation,
    )
    train_rng = rng if rng is not None else np.random.default_rng(train_seed)
    c = critic_mod.estimate_scale_c(ensemble, dataset, config.c_sample_size, train_rng)
    ensemble = replace(ensemble, scale_c=c)
    eta = EtaController(eta=config.eta_init, mode=config.eta_mode, b=config.eta_b,
                        alpha=config.eta_alpha, floor=config.eta_floor)
    return TrainState(
        config=config, policy=policy, ensemble=ensemble,
        actor_opt=nn.adam_init(policy.params.tree()),
        critic_opt=nn.adam_init(nn.tree_layers(ensemble.members)),
        eta=eta, step=0, rng=train_rng,
    )


def _value_sampler(policy: DiffusionPolicy):
    def sample(states, m, rng):
        return actor_mod.sample_actions_batched(policy, states, m, rng, use_ema=True)

    return sample


def train_step(state: TrainState, dataset: OfflineDataset, with_metrics: bool = True):
    """One full update. Returns (state', metrics dict).

    Order: critic update, critic-target EMA, Q-gradient + actor update,
    optional eta ascent, actor-target EMA on its own cadence.

    `with_metrics=False` skips the diagnostic Q evaluation (the q_mean and
    q_lcb_gap entries come back as nan); it never changes the update itself
    or the random stream.
    """
    cfg = state.config
    rng = state.rng
    batch = sample_batch(dataset, cfg.batch_size, rng)

    mode = ValueTargetMode(aggregate=cfg.value_target_aggregate, m_samples=cfg.m_samples)
    if np.all(batch.terminals):
        v_next = None
    else:
        v_next = critic_mod.value_target(batch.next_states, _value_sampler(state.policy),
                                         state.ensemble, mode, rng)

    lr_critic = nn.cosine_lr(state.step, cfg.steps, cfg.lr_critic)
    ensemble, critic_opt, member_losses = critic_mod.critic_update(
        state.ensemble, batch, v_next, state.critic_opt, lr_critic)
    ensemble = critic_mod.ema_update_targets(ensemble, cfg.alpha_ema)

    lr_actor = nn.cosine_lr(state.step, cfg.steps, cfg.lr_actor)
    parts, grads = actor_mod.actor_loss_and_grads(
        state.policy, batch.states, batch.actions, cfg.guidance,
        state.eta.eta, ensemble, rng, denoised_chains=cfg.denoised_chains)
    if not (np.isfinite(parts.total) and np.all(np.isfinite(member_losses))):
        raise RuntimeError(
            "non-finite loss: "
            f"step={state.step} actor_loss={parts.total} bc={parts.bc} "
            f"critic={member_losses.tolist()} eta={state.eta.eta} C={ensemble.scale_c}"
        )
    new_tree, actor_opt = nn.adam_step(state.policy.params.tree(), grads,
                                       state.actor_opt, lr_actor)
    policy = replace(state.policy, params=state.policy.params.with_tree(new_tree))

    eta = state.eta
    if eta.mode == "learnable":
        eta = actor_mod.eta_step(eta, parts.bc)

    step = state.step + 1
    if step % cfg.actor_target_period == 0:
        ema_tree = nn.ema_update(policy.ema.tree(), policy.params.tree(), cfg.alpha_ema)
        policy = replace(policy, ema=policy.ema.with_tree(ema_tree))

    if step % cfg.c_refresh_period == 0:
        c = critic_mod.estimate_scale_c(ensemble, dataset, cfg.c_sample_size, rng)
        ensemble = replace(ensemble, scale_c=c)

    if with_metrics:
        q = critic_mod.member_q_values(ensemble.targets, batch.states, batch.actions)
        q_mean = float(q.mean())
        q_lcb_gap = float(q.mean() - critic_mod.lcb(q, ensemble.rho, axis=0).mean())
    else:
        q_mean = float("nan")
        q_lcb_gap = float("nan")

    metrics = {
        "step": step,
        "actor_loss": parts.total,
        "bc_loss": parts.bc,
        "guidance_term": parts.guidance,
        "critic_loss_mean": float(np.mean(member_losses)),
        "q_mean": q_mean,
        "q_lcb_gap": q_lcb_gap,
        "eta": eta.eta,
        "C": ensemble.scale_c,
        "lr": lr_actor,
    }
    new_state = TrainState(config=cfg, policy=policy, ensemble=ensemble,
                           actor_opt=actor_opt, critic_opt=critic_opt,
                           eta=eta, step=step, rng=rng)
    return new_state, metrics


# -- persistence -------------------------------------------------------------

def _policy_to_files(params: PolicyParams, prefix: str, dirpath: str) -> None:
    tw, tb = params.time_layer
    time_net = nn.MlpParams(layers=((tw, tb),), activation="identity",
                            input_dim=tw.shape[1], output_dim=tw.shape[0])
    nn.save_params(time_net, os.path.join(dirpath, f"{prefix}_time.dacp"))
    nn.save_params(params.net, os.path.join(dirpath, f"{prefix}_net.dacp"))


def _policy_from_files(prefix: str, dirpath: str) -> PolicyParams:
    time_net = nn.load_params(os.path.join(dirpath, f"{prefix}_time.dacp"))
    net = nn.load_params(os.path.join(dirpath, f"{prefix}_net.dacp"))
    return PolicyParams(time_layer=tuple(time_net.layers[0]), net=net)


def _ensemble_members(params: nn.MlpParams):
    h = params.layers[0][0].shape[0]
    for i in range(h):
        yield nn.MlpParams(
            layers=tuple((w[i], b[i]) for w, b in params.layers),
            activation=params.activation, input_dim=params.input_dim,
            output_dim=params.output_dim, hidden_dim=params.hidden_dim)


def _stack_members(members) -> nn.MlpParams:
    first = members[0]
    layers = tuple(
        (np.stack([m.layers[k][0] for m in members]),
         np.stack([m.layers[k][1] for m in members]))
        for k in range(len(first.layers)))
    return nn.MlpParams(layers=layers, activation=first.activation,
                        input_dim=first.input_dim, output_dim=first.output_dim,
                        hidden_dim=first.hidden_dim)


def _pack_tree(tree):
    return [arr for layer in tree for arr in layer]


def save_checkpoint(state: TrainState, dirpath: str, dataset_hash: str = "") -> None:
    """Atomic checkpoint: written under a temp name, renamed into place."""
    tmp = dirpath + ".tmp"
    os.makedirs(tmp, exist_ok=True)
    _policy_to_files(state.policy.params, "policy", tmp)
    _policy_to_files(state.policy.ema, "policy_ema", tmp)
    for i, member in enumerate(_ensemble_members(state.ensemble.members)):
        nn.save_params(member, os.path.join(tmp, f"critic_{i:02d}.dacp"))
    for i, member in enumerate(_ensemble_members(state.ensemble.targets)):
        nn.save_params(member, os.path.join(tmp, f"critic_target_{i:02d}.dacp"))
    opt = {}
    for name, arrs in [
        ("actor_m", _pack_tree(state.actor_opt.m)),
        ("actor_v", _pack_tree(state.actor_opt.v)),
        ("critic_m", _pack_tree(state.critic_opt.m)),
        ("critic_v", _pack_tree(state.critic_opt.v)),
    ]:
        for k, arr in enumerate(arrs):
            opt[f"{name}_{k}"] = arr
    np.savez(os.path.join(tmp, "optimizer.npz"), **opt)
    manifest = {
        "config": dataclasses.asdict(state.config),
        "config_hash": state.config.hash(),
        "dataset_hash": dataset_hash,
        "step": state.step,
        "eta": state.eta.eta,
        "scale_c": state.ensemble.scale_c,
        "actor_opt_step": state.actor_opt.step,
        "critic_opt_step": state.critic_opt.step,
        "rng_state": state.rng.bit_generator.state,
        "saved_at": time.time(),
    }
    with open(os.path.join(tmp, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    if os.path.exists(dirpath):
        import shutil
        shutil.rmtree(dirpath)
    os.rename(tmp, dirpath)


def load_checkpoint(dirpath: str, dataset: OfflineDataset) -> TrainState:
    with open(os.path.join(dirpath, "manifest.json")) as f:
        manifest = json.load(f)
    config = TrainConfig(**manifest["config"])
    state = init_state(config, dataset)
    policy = replace(state.policy,
                     params=_policy_from_files("policy", dirpath),
                     ema=_policy_from_files("policy_ema", dirpath))
    members = _stack_members([nn.load_params(os.path.join(dirpath, f"critic_{i:02d}.dacp"))
                              for i in range(config.ensemble_size)])
    targets = _stack_members([nn.load_params(os.path.join(dirpath, f"critic_target_{i:02d}.dacp"))
                              for i in range(config.ensemble_size)])
    ensemble = replace(state.ensemble, members=members, targets=targets,
                       scale_c=manifest["scale_c"])

    opt = np.load(os.path.join(dirpath, "optimizer.npz"))

    def unpack(name, template):
        arrs = [opt[f"{name}_{k}"] for k in range(sum(len(l) for l in template))]
        it = iter(arrs)
        return [tuple(next(it) for _ in layer) for layer in template]

    actor_tree = policy.params.tree()
    critic_tree = nn.tree_layers(ensemble.members)
    actor_opt = nn.AdamState(m=unpack("actor_m", actor_tree), v=unpack("actor_v", actor_tree),
                             step=manifest["actor_opt_step"])
    critic_opt = nn.AdamState(m=unpack("critic_m", critic_tree), v=unpack("critic_v", critic_tree),
                              step=manifest["critic_opt_step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    eta = replace(state.eta, eta=manifest["eta"])
    return TrainState(config=config, policy=policy, ensemble=ensemble,
                      actor_opt=actor_opt, critic_opt=critic_opt, eta=eta,
                      step=manifest["step"], rng=rng)


def dataset_fingerprint(dataset: OfflineDataset) -> str:
    digest = hashlib.sha256()
    for arr in (dataset.states, dataset.actions, dataset.rewards,
                dataset.next_states, dataset.terminals.astype(np.uint8)):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()[:16]


def run(config: TrainConfig, dataset: OfflineDataset, out_dir: str,
        resume_from: Optional[str] = None) -> TrainState:
    """Full training run: manifest first, then metrics rows and periodic
    checkpoints; a final checkpoint is always written."""
    os.makedirs(out_dir, exist_ok=True)
    ds_hash = dataset_fingerprint(dataset)
    run_manifest = {
        "config": dataclasses.asdict(config),
        "config_hash": config.hash(),
        "dataset_hash": ds_hash,
        "seed": config.seed,
        "started_at": time.time(),
        "out_dir": os.path.abspath(out_dir),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(run_manifest, f, indent=1)

    if resume_from is not None:
        state = load_checkpoint(resume_from, dataset)
        # the caller's config governs the continued run (it normally matches
        # the checkpoint; adopting it keeps the lr schedule consistent)
        state = replace(state, config=config)
    else:
        state = init_state(config, dataset)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    fresh = state.step == 0 or not os.path.exists(metrics_path)
    metrics_file = open(metrics_path, "w" if fresh else "a")
    if fresh:
        metrics_file.write(METRICS_HEADER + "\n")

    def ckpt_path(step):
        return os.path.join(out_dir, f"ckpt_{step:08d}")

    try:
        while state.step < config.steps:
            next_step = state.step + 1
            log_row = next_step % config.metrics_period == 0 or next_step == config.steps
            state, metrics = train_step(state, dataset, with_metrics=log_row)
            if log_row:
                row = ",".join(repr(metrics[k]) if isinstance(metrics[k], float)
                               else str(metrics[k]) for k in METRICS_HEADER.split(","))
                metrics_file.write(row + "\n")
                metrics_file.flush()
            if state.step % config.checkpoint_period == 0:
                save_checkpoint(state, ckpt_path(state.step), ds_hash)
        save_checkpoint(state, os.path.join(out_dir, "ckpt_final"), ds_hash)
    finally:
        metrics_file.close()
    return state
