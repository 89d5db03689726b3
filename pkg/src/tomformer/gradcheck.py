"""Finite-difference verification of every differentiable primitive and of the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from tomformer import tensor as T
from tomformer.matching import BoundingBox, set_loss
from tomformer.model import ModelConfig, forward, init_parameters
from tomformer.tensor import Tensor, finite_diff_check

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
EPS = 1e-5

# H=W=8, P=4, D=8, one layer, two queries
TINY_CONFIG = ModelConfig(
    image_channels=3,
    image_height=8,
    image_width=8,
    patch_size=4,
    embed_dim=8,
    num_heads=2,
    num_layers=1,
    num_queries=2,
    num_classes=3,
    mlp_hidden_dims=(8, 8),
    head_hidden_dims=(8, 8),
)


@dataclass
class GradcheckRow:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random weights avoid structurally zero gradients (e.g. sum of softmax)
    return (out * Tensor(w)).sum()


def op_cases(seed: int = 0) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-2, 2, size=shape)

    def w(*shape):
        # magnitudes in [0.5, 2]: keeps every true gradient well above the error floor
        return rng.uniform(0.5, 2, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    a, b = u(3, 4), u(4, 5)
    img, ker = u(2, 6, 6), u(3, 2, 3, 3)
    gamma, beta = rng.uniform(0.5, 1.5, 6), u(6)
    # maxpool inputs: distinct values, so no window ties
    pool_in = rng.permutation(np.linspace(-2, 2, 2 * 4 * 6)).reshape(2, 4, 6)
    w34, w35, w36, w_conv, w_pool = w(3, 4), w(3, 5), w(3, 6), w(3, 3, 3), w(2, 2, 3)
    w38, w43, w22 = w(3, 8), w(4, 3), w(2, 2)
    relu_in = u(3, 4)
    relu_in[np.abs(relu_in) < 0.05] = 0.5  # stay away from the kink

    return [
        ("matmul[a]", lambda x: _weighted(T.matmul(x, Tensor(b)), w35), a),
        ("matmul[b]", lambda x: _weighted(T.matmul(Tensor(a), x), w35), b),
        ("conv2d[input]", lambda x: _weighted(T.conv2d(x, Tensor(ker), 2, 1), w_conv), img),
        ("conv2d[kernels]", lambda k: _weighted(T.conv2d(Tensor(img), k, 2, 1), w_conv), ker),
        ("maxpool2d", lambda x: _weighted(T.maxpool2d(x, 2, 2), w_pool), pool_in),
        ("layer_norm[x]", lambda x: _weighted(T.layer_norm(x, Tensor(gamma), Tensor(beta)), w36), u(3, 6)),
        ("layer_norm[gamma]", lambda g: _weighted(T.layer_norm(Tensor(w36), g, Tensor(beta)), w36 ** 2), gamma),
        ("layer_norm[beta]", lambda bt: _weighted(T.layer_norm(Tensor(w36), Tensor(gamma), bt), w36), beta),
        ("softmax", lambda x: _weighted(T.softmax(x, axis=-1), w34), u(3, 4)),
        ("log_softmax", lambda x: _weighted(T.log_softmax(x, axis=-1), w34), u(3, 4)),
        ("gelu", lambda x: T.gelu(x).sum(), u(3, 4)),
        ("relu", lambda x: _weighted(T.relu(x), w34), relu_in),
        ("sigmoid", lambda x: _weighted(T.sigmoid(x), w34), u(3, 4)),
        ("concat", lambda x: _weighted(T.concat([x, Tensor(w34)], axis=1), w38), u(3, 4)),
        ("add_bias", lambda x: _weighted(Tensor(w34) + x, w34), u(4)),
        ("mul", lambda x: _weighted(x * Tensor(w34), w34), u(3, 4)),
        ("div", lambda x: _weighted(Tensor(w34) / (x * x + 1.0), w34), u(3, 4)),
        ("exp_log", lambda x: ((x.exp() + 1.0).log() * Tensor(w34)).sum(), u(3, 4)),
        ("transpose", lambda x: _weighted(x.T, w43), u(3, 4)),
        ("getitem", lambda x: _weighted(x[1:, ::2], w22), u(3, 4)),
        ("sum_axis", lambda x: _weighted(x.sum(axis=0), w34[0]), u(3, 4)),
        ("reshape", lambda x: _weighted(x.reshape(4, 3), w43), u(3, 4)),
        ("abs", lambda x: _weighted(x.abs(), w34), w(3, 4)),
        ("maximum", lambda x: _weighted(T.maximum(x, Tensor(w34)), w34), w34 + w(3, 4) * 0.5),
        ("minimum", lambda x: _weighted(T.minimum(x, Tensor(w34)), w34), w34 + w(3, 4) * 0.5),
    ]


def tiny_end_to_end(seed: int = 0) -> tuple[Callable[[Tensor], Tensor], np.ndarray, list]:
    """Scalar set loss through ``forward`` for the tiny config.

    Returns the loss as a function of every parameter packed into one
    flat vector, the starting vector, and the parameter layout.
    """
    cfg = TINY_CONFIG
    params = init_parameters(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    # nonzero queries and biases so no gradient is structurally tiny
    for name, t in params.items():
        t.data = t.data + rng.normal(0.0, 0.1, size=t.shape)
    image = Tensor(rng.uniform(-1, 1, size=(cfg.image_channels, cfg.image_height, cfg.image_width)))
    targets = [(1, BoundingBox(0.4, 0.45, 0.3, 0.25))]
    layout = [(name, t.shape, t.size) for name, t in params.items()]
    flat0 = params.flat()
    # freeze the assignment at the starting point so perturbations cannot flip it
    assignment = set_loss(forward(image, params, cfg), targets).assignment

    def loss(flat: Tensor) -> Tensor:
        views, start = {}, 0
        for name, shape, size in layout:
            views[name] = flat[start : start + size].reshape(shape)
            start += size
        out = forward(image, type(params)(views), cfg)
        breakdown = set_loss(out, targets)
        if breakdown.assignment != assignment:
            raise RuntimeError("assignment changed under perturbation")
        return breakdown.loss

    return loss, flat0, layout


def run_suite(seed: int = 0, include_end_to_end: bool = True) -> list[GradcheckRow]:
    rows = []
    for name, fn, x in op_cases(seed):
        t0 = time.perf_counter()
        err = finite_diff_check(fn, x, EPS)
        rows.append(GradcheckRow(name, err, OP_TOLERANCE, time.perf_counter() - t0))
    if include_end_to_end:
        t0 = time.perf_counter()
        fn, x, _ = tiny_end_to_end(seed)
        err = finite_diff_check(fn, x, EPS)
        rows.append(GradcheckRow("end_to_end[tiny]", err, END_TO_END_TOLERANCE, time.perf_counter() - t0))
    return rows


def format_table(rows: list[GradcheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'op':<{width}}  {'max_rel_error':>13}  {'tol':>7}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:13.3e}  {r.tolerance:7.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
