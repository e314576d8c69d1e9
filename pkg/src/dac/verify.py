"""Numeric checks of the framework's analytic identities.

Each check returns a small dict (name, passed, details) so the CLI can emit a
machine-readable report; the acceptance tests call the same functions.
"""

from __future__ import annotations

import numpy as np

from . import actor as actor_mod
from . import critic as critic_mod
from . import nn
from .data import generate_lq_dataset
from .diffusion import forward_noise, make_vp_schedule, score_from_noise

CHECK_NAMES = ("lemma1", "theorem2", "marginal", "lcb_algebra", "finite_diff",
               "scale_invariance")


def check_lemma1(seed: int = 0, n: int = 1000, T: int = 5) -> dict:
    """Noise-to-score identity: the converted noise equals the analytic Gaussian
    score of the forward kernel at the noised point, to machine precision."""
    rng = np.random.default_rng(seed)
    sched = make_vp_schedule(T)
    worst = 0.0
    for _ in range(n):
        a = rng.uniform(-1, 1, size=2)
        eps = rng.standard_normal(2)
        t = int(rng.integers(1, T + 1))
        sample = forward_noise(a, t, eps, sched)
        abar = sched.alpha_bars[t - 1]
        analytic = -(sample.x_t - np.sqrt(abar) * a) / (1.0 - abar)
        got = score_from_noise(eps, t, sched)
        worst = max(worst, float(np.abs(got - analytic).max()))
    return {"name": "lemma1", "passed": worst < 1e-12, "max_abs_err": worst}


def _policy_grad(nodes_tree, loss_node):
    loss_node.backward()
    return [tuple(p.grad.copy() for p in layer) for layer in nodes_tree]


def check_theorem2(seed: int = 0, n_draws: int = 100_000, eta: float = 1.0,
                   chunk: int = 2000, corrupt_noise_scale: bool = False) -> dict:
    """Gradient equivalence of direct target-noise regression and the guided
    noise-regression loss, averaged over matched behavior draws."""
    from . import autodiff as ad

    rng = np.random.default_rng(seed)
    _, oracle = generate_lq_dataset(1, seed=seed)
    sched = make_vp_schedule(5)
    params = actor_mod.init_policy_params(1, 2, rng, hidden_dim=32, n_hidden=2)
    tree = params.tree()

    sums_a = [tuple(np.zeros_like(p) for p in layer) for layer in tree]
    sums_b = [tuple(np.zeros_like(p) for p in layer) for layer in tree]
    chol = np.linalg.cholesky(oracle.sigma_b)
    done = 0
    while done < n_draws:
        b = min(chunk, n_draws - done)
        done += b
        a = oracle.mu_b + rng.standard_normal((b, 2)) @ chol.T
        eps = rng.standard_normal((b, 2))
        t = rng.integers(1, sched.T + 1, size=b)
        abar = sched.alpha_bars[t - 1][:, None]
        x_t = np.sqrt(abar) * a + np.sqrt(1.0 - abar) * eps
        s = np.zeros((b, 1))
        scale = sched.noise_scale[t - 1][:, None]

        target_a = np.stack([
            actor_mod.behavior_guided_target_noise(x_t[i], int(t[i]), oracle, eta, sched)
            for i in range(b)
        ])
        guidance_scale = np.ones_like(scale) if corrupt_noise_scale else scale
        target_b = eps - (guidance_scale / eta) * oracle.reward_grad(x_t)

        for target, sums in ((target_a, sums_a), (target_b, sums_b)):
            nodes = [tuple(ad.Node(p) for p in layer) for layer in tree]
            eps_hat = actor_mod.predict_noise_graph(nodes, x_t, s, t, sched.T)
            loss = ad.nsum(ad.square(ad.sub(eps_hat, target)))
            g = _policy_grad(nodes, loss)
            for layer_s, layer_g in zip(sums, g):
                for acc, grad in zip(layer_s, layer_g):
                    acc += grad

    worst = 0.0
    blocks = []
    for layer_a, layer_b in zip(sums_a, sums_b):
        for ga, gb in zip(layer_a, layer_b):
            na, nb = np.linalg.norm(ga), np.linalg.norm(gb)
            rel = np.linalg.norm(ga - gb) / max(na, nb, 1e-12)
            blocks.append(float(rel))
            worst = max(worst, float(rel))
    return {"name": "theorem2", "passed": worst < 0.02, "max_block_rel_err": worst,
            "block_rel_errs": blocks, "n_draws": n_draws}


def check_marginal(seed: int = 0, n: int = 100_000, T: int = 5) -> dict:
    """Empirical mean/variance of forward noising match the analytic marginal
    within 3 standard errors."""
    rng = np.random.default_rng(seed)
    sched = make_vp_schedule(T)
    a = np.array([0.7, -0.3])
    ok = True
    details = []
    for t in range(1, T + 1):
        abar = sched.alpha_bars[t - 1]
        eps = rng.standard_normal((n, 2))
        x = np.sqrt(abar) * a + np.sqrt(1.0 - abar) * eps
        se_mean = np.sqrt((1.0 - abar) / n)
        mean_dev = np.abs(x.mean(axis=0) - np.sqrt(abar) * a).max() / se_mean
        se_var = (1.0 - abar) * np.sqrt(2.0 / n)
        var_dev = np.abs(x.var(axis=0) - (1.0 - abar)).max() / se_var
        details.append({"t": t, "mean_dev_se": float(mean_dev), "var_dev_se": float(var_dev)})
        ok = ok and mean_dev < 3.0 and var_dev < 3.0
    return {"name": "marginal", "passed": ok, "per_step": details}


def check_lcb_algebra(seed: int = 0, n: int = 10_000) -> dict:
    """rho=0 gives the mean; two members give mean - popstd = min; the bound is
    monotone non-increasing in rho."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for _ in range(n):
        h = int(rng.integers(1, 12))
        vals = rng.normal(0, 3, size=h)
        worst = max(worst, abs(critic_mod.lcb(vals, 0.0) - vals.mean()))
        rhos = np.sort(rng.uniform(0, 3, size=4))
        bounds = [critic_mod.lcb(vals, float(r)) for r in rhos]
        ok = ok and all(b1 >= b2 - 1e-12 for b1, b2 in zip(bounds, bounds[1:]))
        ok = ok and all(b <= vals.mean() + 1e-12 for b in bounds)
        two = rng.normal(0, 3, size=2)
        worst = max(worst, abs(critic_mod.lcb(two, 1.0) - two.min()))
    return {"name": "lcb_algebra", "passed": ok and worst < 1e-12, "max_abs_err": float(worst)}


def finite_difference_grads(params: nn.MlpParams, loss_of_params, step: float = 1e-5):
    """Central finite differences of loss_of_params(MlpParams) -> float."""
    grads = []
    layers = [list(map(np.array, layer)) for layer in params.layers]

    def rebuilt():
        return nn.with_layers(params, [tuple(l) for l in layers])

    for li, layer in enumerate(layers):
        layer_grads = []
        for pi, arr in enumerate(layer):
            g = np.zeros_like(arr)
            flat = arr.ravel()
            gflat = g.ravel()
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                up = loss_of_params(rebuilt())
                flat[k] = orig - step
                down = loss_of_params(rebuilt())
                flat[k] = orig
                gflat[k] = (up - down) / (2 * step)
            layer_grads.append(g)
        grads.append(tuple(layer_grads))
    return grads


def check_finite_diff(seed: int = 0, n_configs: int = 20, tol: float = 1e-4) -> dict:
    """Backprop gradients of a squared-error MLP loss match central differences."""
    from . import autodiff as ad

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        in_dim = int(rng.integers(1, 4))
        out_dim = int(rng.integers(1, 3))
        params = nn.init_mlp(in_dim, out_dim, rng, hidden_dim=5,
                             n_hidden=int(rng.integers(1, 3)))
        x = rng.uniform(-1, 1, size=(4, in_dim))
        y = rng.uniform(-1, 1, size=(4, out_dim))

        def loss_nodes(nodes):
            out = nn.mlp_forward_graph(nodes, x, "mish")
            return ad.nmean(ad.square(ad.sub(out, y)))

        got = nn.grad(loss_nodes, params)
        want = finite_difference_grads(
            params, lambda p: float(np.mean((nn.mlp_forward(p, x) - y) ** 2)))
        for lg, lw in zip(got, want):
            for g, w in zip(lg, lw):
                denom = max(np.abs(w).max(), 1.0)
                worst = max(worst, float(np.abs(g - w).max() / denom))
    return {"name": "finite_diff", "passed": worst < tol, "max_rel_err": worst}


def check_scale_invariance(seed: int = 0, factors=(0.1, 10.0, 1000.0)) -> dict:
    """Rescaling every critic output and re-estimating C leaves the normalized
    Q-gradient unchanged."""
    from dataclasses import replace

    from .data import generate_lq_dataset

    rng = np.random.default_rng(seed)
    dataset, _ = generate_lq_dataset(512, seed=seed)
    ens = critic_mod.init_ensemble(4, 1, 2, rng, rho=0.0, gamma=0.99,
                                  hidden_dim=16, n_hidden=2)
    c0 = critic_mod.estimate_scale_c(ens, dataset, 256, np.random.default_rng(1))
    ens = replace(ens, scale_c=c0)
    s = np.zeros((8, 1))
    x = rng.uniform(-2, 2, size=(8, 2))
    base = critic_mod.q_gradient(ens, s, x)
    worst = 0.0
    for c in factors:
        scaled_layers = list(ens.targets.layers[:-1])
        w, b = ens.targets.layers[-1]
        scaled_layers.append((w * c, b * c))
        scaled = replace(ens, targets=nn.with_layers(ens.targets, scaled_layers))
        c_new = critic_mod.estimate_scale_c(scaled, dataset, 256, np.random.default_rng(1))
        scaled = replace(scaled, scale_c=c_new)
        got = critic_mod.q_gradient(scaled, s, x)
        rel = np.abs(got - base).max() / max(np.abs(base).max(), 1e-12)
        worst = max(worst, float(rel))
    return {"name": "scale_invariance", "passed": worst < 1e-10, "max_rel_err": worst}


def run_checks(only=None, seed: int = 0, corrupt_noise_scale: bool = False,
               fast: bool = False) -> list:
    checks = {
        "lemma1": lambda: check_lemma1(seed),
        "theorem2": lambda: check_theorem2(
            seed, n_draws=20_000 if fast else 100_000,
            corrupt_noise_scale=corrupt_noise_scale),
        "marginal": lambda: check_marginal(seed),
        "lcb_algebra": lambda: check_lcb_algebra(seed),
        "finite_diff": lambda: check_finite_diff(seed),
        "scale_invariance": lambda: check_scale_invariance(seed),
    }
    names = [only] if only else list(CHECK_NAMES)
    unknown = [n for n in names if n not in checks]
    if unknown:
        raise ValueError(f"unknown check(s): {unknown}; available: {list(checks)}")
    return [checks[n]() for n in names]
