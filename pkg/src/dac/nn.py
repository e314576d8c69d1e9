"""Small MLP toolkit: parameters, forward pass, gradients, Adam, EMA, checkpoints.

Parameter containers are plain numpy trees with value semantics; every update
returns fresh arrays, so parameter records can be handed between threads freely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable, List, Tuple

import numpy as np

from . import autodiff as ad

Layer = Tuple[np.ndarray, np.ndarray]  # (weight [out, in], bias [out])

MAGIC = b"DACP"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class MlpParams:
    """Feed-forward network weights with a fixed hidden nonlinearity.

    The final layer is always linear; hidden layers use `activation`
    ("mish" or "identity").
    """

    layers: Tuple[Layer, ...]
    activation: str = "mish"
    input_dim: int = 0
    output_dim: int = 0
    hidden_dim: int = 0

    def __post_init__(self):
        if self.activation not in ("mish", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        for k in range(len(self.layers) - 1):
            if self.layers[k][0].shape[-2] != self.layers[k + 1][0].shape[-1]:
                raise ShapeError(
                    f"layer {k} output dim {self.layers[k][0].shape[-2]} does not "
                    f"chain into layer {k + 1} input dim {self.layers[k + 1][0].shape[-1]}"
                )


def init_mlp(
    in_dim: int,
    out_dim: int,
    rng: np.random.Generator,
    hidden_dim: int = 256,
    n_hidden: int = 3,
    activation: str = "mish",
) -> MlpParams:
    """Uniform fan-in initialization (bound 1/sqrt(fan_in)), zero biases."""
    dims = [in_dim] + [hidden_dim] * n_hidden + [out_dim]
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        layers.append((w, np.zeros(d_out)))
    return MlpParams(
        layers=tuple(layers),
        activation=activation,
        input_dim=in_dim,
        output_dim=out_dim,
        hidden_dim=hidden_dim,
    )


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass. `x` may carry leading batch/ensemble axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.layers[0][0].shape[-1]:
        raise ShapeError(
            f"input dim {x.shape[-1]} != expected {params.layers[0][0].shape[-1]}"
        )
    n = len(params.layers)
    for k, (w, b) in enumerate(params.layers):
        x = np.matmul(x, np.swapaxes(w, -1, -2)) + (b if b.ndim == 1 else b[..., None, :])
        if k < n - 1 and params.activation == "mish":
            x = ad._mish(x)
    return x


def mlp_forward_graph(layers, x, activation: str = "mish"):
    """Graph-building forward pass; `layers` entries may be Nodes or arrays."""
    n = len(layers)
    for k, (w, b) in enumerate(layers):
        if k < n - 1 and activation == "mish":
            x = ad.affine_mish(x, w, b)
        else:
            x = ad.affine(x, w, b)
    return x


def as_nodes(params: MlpParams):
    return [(ad.Node(w), ad.Node(b)) for w, b in params.layers]


def grad(loss: Callable, params: MlpParams):
    """Gradient of `loss(layer_nodes) -> scalar Node` with respect to every parameter.

    Returns a layers-shaped tree of arrays.
    """
    nodes = as_nodes(params)
    out = loss(nodes)
    if not isinstance(out, ad.Node):
        raise ad.UnsupportedPrimitiveError("loss did not produce a graph node")
    out.backward()
    return [(w.grad, b.grad) for w, b in nodes]


# -- trees ------------------------------------------------------------------

def tree_map(fn, *trees):
    return [tuple(fn(*leaves) for leaves in zip(*layers)) for layers in zip(*trees)]


def tree_layers(params: MlpParams):
    return [tuple(layer) for layer in params.layers]


def with_layers(params: MlpParams, layers) -> MlpParams:
    return replace(params, layers=tuple(tuple(l) for l in layers))


# -- optimizer --------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params_tree, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = tree_map(np.zeros_like, params_tree)
    return AdamState(m=zeros, v=tree_map(np.zeros_like, params_tree), step=0,
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params_tree, grads_tree, state: AdamState, lr: float):
    """One Adam update with bias correction. Returns (params', state')."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for li, layer in enumerate(grads_tree):
        for pi, g in enumerate(layer):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at layer {li}, slot {pi}")
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    m = tree_map(lambda m_, g: b1 * m_ + (1 - b1) * g, state.m, grads_tree)
    v = tree_map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, state.v, grads_tree)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new = tree_map(
        lambda p, m_, v_: p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps),
        params_tree, m, v,
    )
    return new, AdamState(m=m, v=v, step=t, beta1=b1, beta2=b2, eps=eps)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if base_lr <= 0:
        raise ValueError("base_lr must be positive")
    return float(base_lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps)))


def ema_update(target_tree, online_tree, alpha: float):
    """Elementwise (1 - alpha) * target + alpha * online."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"ema rate {alpha} outside [0, 1]")
    return tree_map(lambda t, o: (1.0 - alpha) * t + alpha * o, target_tree, online_tree)


def ema_update_params(target: MlpParams, online: MlpParams, alpha: float) -> MlpParams:
    return with_layers(target, ema_update(tree_layers(target), tree_layers(online), alpha))


# -- checkpoints ------------------------------------------------------------

def save_params(params: MlpParams, path) -> None:
    """Flat binary dump: magic, version u32, layer count u32, then per layer
    (out u32, in u32, weights row-major f64 LE, bias f64 LE)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(params.layers)))
        for w, b in params.layers:
            out_dim, in_dim = w.shape
            f.write(struct.pack("<II", out_dim, in_dim))
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_params(path, activation: str = "mish") -> MlpParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r} (offset 0)")
    off = 4
    version, n_layers = struct.unpack_from("<II", raw, off)
    off += 8
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} (offset 4)")
    layers = []
    for _ in range(n_layers):
        if off + 8 > len(raw):
            raise FormatError(f"truncated layer header at offset {off}")
        out_dim, in_dim = struct.unpack_from("<II", raw, off)
        off += 8
        need = 8 * (out_dim * in_dim + out_dim)
        if off + need > len(raw):
            raise FormatError(f"truncated layer payload at offset {off}")
        w = np.frombuffer(raw, dtype="<f8", count=out_dim * in_dim, offset=off).reshape(out_dim, in_dim)
        off += 8 * out_dim * in_dim
        b = np.frombuffer(raw, dtype="<f8", count=out_dim, offset=off)
        off += 8 * out_dim
        layers.append((w.copy(), b.copy()))
    in_dim = layers[0][0].shape[1]
    out_dim = layers[-1][0].shape[0]
    hidden = layers[0][0].shape[0] if n_layers > 1 else 0
    return MlpParams(
        layers=tuple(layers), activation=activation,
        input_dim=in_dim, output_dim=out_dim, hidden_dim=hidden,
    )
