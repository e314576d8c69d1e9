"""Command-line entry point: data generation, training, evaluation, checks,
plotting and step timing.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import evaluation as ev
from . import plotting, trainer, verify
from .data import (BanditSpec, generate_bandit_dataset, generate_lq_dataset,
                   load_dataset, load_lq_oracle, save_dataset, save_lq_oracle)
from .diffusion import make_vp_schedule
from .trainer import TrainConfig

log = logging.getLogger("dac")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


# -- config files ------------------------------------------------------------

def _coerce(raw: str, target_type):
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    return target_type(raw)


def load_config_file(path: str) -> dict:
    """Flat key=value lines; '#' starts a comment; keys are TrainConfig fields."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    defaults = {name: getattr(TrainConfig(), name) for name in fields}
    # fields defaulting to None are the optional critic dimensions (ints)
    types = {name: int if value is None else type(value)
             for name, value in defaults.items()}
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in types:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                out[key] = _coerce(raw.strip(), types[key])
            except (ValueError, TypeError) as exc:
                raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def build_train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    overrides = {
        "steps": args.steps, "batch_size": args.batch_size,
        "lr_actor": args.lr, "lr_critic": args.lr,
        "diffusion_steps": args.T, "ensemble_size": args.H,
        "rho": args.rho, "guidance": args.guidance,
        "eta_mode": args.eta_mode, "eta_init": args.eta,
        "eta_b": args.b, "hidden_dim": args.hidden_dim,
        "n_hidden": args.n_hidden, "seed": args.seed,
        "critic_hidden_dim": args.critic_hidden_dim,
        "critic_n_hidden": args.critic_n_hidden,
        "denoised_chains": args.denoised_chains,
    }
    if args.lr_actor is not None:
        overrides["lr_actor"] = args.lr_actor
    if args.lr_critic is not None:
        overrides["lr_critic"] = args.lr_critic
    values.update({k: v for k, v in overrides.items() if v is not None})
    eta_mode = values.get("eta_mode", TrainConfig().eta_mode)
    if eta_mode == "constant" and args.b is not None:
        raise UsageError("--b sets the dual-ascent threshold; it conflicts with "
                         "a constant eta (drop --b or use --eta-mode learnable)")
    try:
        config = TrainConfig(**values)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return config


# -- commands ----------------------------------------------------------------

def cmd_make_data(args) -> int:
    if args.env == "bandit":
        spec = BanditSpec(n=args.n, pattern=args.pattern, noise_std=args.noise_std,
                          reward_noise_std=args.reward_noise_std, seed=args.seed)
        dataset = generate_bandit_dataset(spec)
    else:
        dataset, oracle = generate_lq_dataset(args.n, seed=args.seed)
        save_lq_oracle(oracle, args.out + ".oracle.json")
    save_dataset(dataset, args.out)
    log.info("wrote %d transitions to %s", len(dataset), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    config = build_train_config(args)
    dataset = load_dataset(args.data)
    out_dir = args.out_dir or "."
    state = trainer.run(config, dataset, out_dir, resume_from=args.resume_from)
    log.info("finished at step %d; artifacts in %s", state.step, out_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    state = trainer.load_checkpoint(args.ckpt, dataset)
    with open(os.path.join(args.ckpt, "manifest.json")) as f:
        manifest = json.load(f)
    ds_hash = trainer.dataset_fingerprint(dataset)
    if manifest.get("dataset_hash") and manifest["dataset_hash"] != ds_hash:
        raise UsageError(
            f"dataset drift: checkpoint was trained on {manifest['dataset_hash']}, "
            f"--data hashes to {ds_hash}")
    rng = np.random.default_rng(args.seed)
    if args.env == "bandit":
        spec = BanditSpec(pattern=args.pattern)
        report = ev.evaluate_bandit(state.policy, state.ensemble, dataset, spec,
                                    rng, n_rollouts=args.rollouts).to_dict()
    else:
        oracle = load_lq_oracle(args.data + ".oracle.json")
        rep = ev.evaluate_lq(state.policy, oracle, state.eta.eta, rng)
        report = {
            "sample_mean": rep.sample_mean.tolist(),
            "sample_cov": rep.sample_cov.tolist(),
            "oracle_mean": rep.oracle_mean.tolist(),
            "oracle_cov": rep.oracle_cov.tolist(),
            "mean_error": rep.mean_error,
        }
    payload = json.dumps(report, indent=1)
    print(payload)
    if args.json:
        with open(args.json, "w") as f:
            f.write(payload + "\n")
    return EXIT_OK


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    return value


def cmd_verify(args) -> int:
    results = _jsonable(verify.run_checks(only=args.only, seed=args.seed,
                                          corrupt_noise_scale=args.corrupt_noise_scale,
                                          fast=args.fast))
    report = {"checks": results, "passed": all(r["passed"] for r in results)}
    print(json.dumps(report, indent=1))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(report, f, indent=1)
    for r in results:
        log.info("%-16s %s", r["name"], "pass" if r["passed"] else "FAIL")
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


def cmd_plot(args) -> int:
    dataset = load_dataset(args.data)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    panels, labels = [], []
    for ckpt in args.ckpt:
        if not os.path.isdir(ckpt):
            raise UsageError(f"checkpoint directory not found: {ckpt}")
        state = trainer.load_checkpoint(ckpt, dataset)
        rng = np.random.default_rng(args.seed)
        data = plotting.panel_data(state, dataset, rng, n_extract=args.rollouts)
        label = os.path.basename(os.path.normpath(ckpt))
        plotting.write_panel_csv(data, os.path.join(out_dir, f"panel_{label}.csv"))
        panels.append(data)
        labels.append(f"{label} ({state.config.guidance})")
    if not args.csv_only:
        plotting.render_panels(panels, labels, os.path.join(out_dir, "panels.svg"))
    log.info("wrote %d panel(s) to %s", len(panels), out_dir)
    return EXIT_OK


def cmd_bench_step(args) -> int:
    rows = bench_mod.bench_guidance(t_values=tuple(args.T), reps=args.reps)
    print("T,soft_s,denoised_s,ratio")
    for row in rows:
        print(f"{row['T']},{row['soft_s']:.6f},{row['denoised_s']:.6f},{row['ratio']:.4f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)
    return EXIT_OK


def cmd_schedule(args) -> int:
    sched = make_vp_schedule(args.T)
    print("t,beta_t,alpha_bar_t,sqrt_one_minus_alpha_bar_t")
    for t in range(1, sched.T + 1):
        print(f"{t},{float(sched.betas[t - 1])!r},{float(sched.alpha_bars[t - 1])!r},"
              f"{float(sched.noise_scale[t - 1])!r}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--log-level", default="info",
                   choices=["debug", "info", "warning", "error"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dac",
        description="Diffusion-policy offline actor-critic toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate an offline dataset file")
    _add_common(p)
    p.add_argument("--env", choices=["bandit", "lq"], required=True)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--out", required=True)
    p.add_argument("--pattern", default="ring",
                   choices=["ring", "crescent", "grid", "two_mode"])
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--reward-noise-std", type=float, default=0.5)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train", help="run a training loop")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset file (.dacd)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="sets both actor and critic rates")
    p.add_argument("--lr-actor", type=float)
    p.add_argument("--lr-critic", type=float)
    p.add_argument("--T", type=int, help="diffusion steps")
    p.add_argument("--H", type=int, help="critic ensemble size")
    p.add_argument("--rho", type=float)
    p.add_argument("--guidance", choices=["soft", "hard", "denoised"])
    p.add_argument("--eta", type=float, help="initial (or constant) eta")
    p.add_argument("--eta-mode", choices=["constant", "learnable"])
    p.add_argument("--b", type=float, help="dual-ascent behavior-cloning threshold")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--n-hidden", type=int)
    p.add_argument("--critic-hidden-dim", type=int,
                   help="critic width (defaults to --hidden-dim)")
    p.add_argument("--critic-n-hidden", type=int,
                   help="critic depth (defaults to --n-hidden)")
    p.add_argument("--denoised-chains", type=int,
                   help="denoising rollouts per step for the denoised value "
                        "estimate (defaults to the batch size)")
    p.add_argument("--resume-from", help="checkpoint directory to resume")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--env", choices=["bandit", "lq"], required=True)
    p.add_argument("--rollouts", type=int, default=80)
    p.add_argument("--pattern", default="ring",
                   choices=["ring", "crescent", "grid", "two_mode"])
    p.add_argument("--json", help="also write the report to this file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the analytic identity checks")
    _add_common(p)
    p.add_argument("--only", choices=list(verify.CHECK_NAMES))
    p.add_argument("--fast", action="store_true",
                   help="smaller draw counts (development convenience)")
    p.add_argument("--corrupt-noise-scale", action="store_true",
                   help="deliberately break the guidance noise scale; the "
                        "gradient-equivalence check must then fail")
    p.add_argument("--json", help="write the report to this file")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("plot", help="render bandit panels from checkpoints")
    _add_common(p)
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint directory; repeat for multiple panels")
    p.add_argument("--data", required=True)
    p.add_argument("--rollouts", type=int, default=200)
    p.add_argument("--csv-only", action="store_true")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("bench-step", help="time soft vs denoised updates")
    _add_common(p)
    p.add_argument("--T", type=int, nargs="+", default=[5, 10, 20, 50, 100])
    p.add_argument("--reps", type=int, default=15)
    p.add_argument("--json", help="write rows to this file")
    p.set_defaults(fn=cmd_bench_step)

    p = sub.add_parser("schedule", help="print a noise schedule table")
    _add_common(p)
    p.add_argument("--T", type=int, required=True)
    p.set_defaults(fn=cmd_schedule)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE if isinstance(exc, FileNotFoundError) else EXIT_RUNTIME
    except Exception as exc:  # runtime failures keep a distinct exit code
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
