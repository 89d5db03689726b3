"""The TomFormer network: CNN/patch token fusion, object queries, pre-norm encoder, FFN heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from tomformer import tensor as T
from tomformer.errors import ConfigError, ShapeError
from tomformer.tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_channels: int = 3
    image_height: int = 32
    image_width: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    num_heads: int = 4
    num_layers: int = 2
    num_queries: int = 20
    num_classes: int = 8
    mlp_hidden_dims: tuple[int, int] = (64, 64)
    head_hidden_dims: tuple[int, int] = (64, 64)
    # None selects the default stage layout (see default_cnn_stages)
    cnn_channels: tuple[int, ...] | None = None
    cnn_pool_sizes: tuple[int, ...] | None = None
    cnn_kernel_size: int = 3
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("mlp_hidden_dims", "head_hidden_dims", "cnn_channels", "cnn_pool_sizes"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(int(v) for v in value))
        p = self.patch_size
        if p < 1 or self.image_height % p or self.image_width % p:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} is not divisible by patch size {p}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be at least 1")
        if len(self.mlp_hidden_dims) != 2 or len(self.head_hidden_dims) != 2:
            raise ConfigError("mlp_hidden_dims and head_hidden_dims need exactly two extents")
        if self.cnn_kernel_size % 2 == 0:
            raise ConfigError("cnn_kernel_size must be odd so convolutions preserve size")
        channels, pools = self.cnn_stages
        if len(channels) != len(pools) or not channels:
            raise ConfigError("cnn_channels and cnn_pool_sizes must be non-empty and equally long")
        if channels[-1] != self.embed_dim:
            raise ConfigError(f"last CNN stage must output embed_dim={self.embed_dim} channels, got {channels[-1]}")
        h, w = self.image_height, self.image_width
        for pool in pools:
            if pool < 1 or h % pool or w % pool:
                raise ConfigError(f"pool size {pool} does not divide feature map {h}x{w}")
            h, w = h // pool, w // pool
        if (h, w) != self.grid:
            raise ConfigError(f"CNN stages end at {h}x{w}, expected the patch grid {self.grid}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.image_channels

    @property
    def cnn_stages(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.cnn_channels is None and self.cnn_pool_sizes is None:
            return default_cnn_stages(self.patch_size, self.embed_dim)
        if self.cnn_channels is None or self.cnn_pool_sizes is None:
            raise ConfigError("set both cnn_channels and cnn_pool_sizes, or neither")
        return self.cnn_channels, self.cnn_pool_sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def default_cnn_stages(patch_size: int, embed_dim: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    root = math.isqrt(patch_size)
    if root * root == patch_size and root > 1:
        return (max(1, embed_dim // 2), embed_dim), (root, root)
    return (embed_dim,), (patch_size,)


@dataclass
class DetectionOutput:
    class_logits: Tensor  # Q x (K+1); last column is the no-object class
    boxes: Tensor  # Q x 4, (cx, cy, w, h) in [0, 1]

    def probabilities(self) -> np.ndarray:
        z = self.class_logits.data - self.class_logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


class ModelParams:
    """Ordered name -> Tensor mapping holding every learnable scalar."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def total_size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])


# ---------------------------------------------------------------------------
# parameter layout


def _mlp_shapes(prefix: str, dims: list[int]) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        out.append((f"{prefix}.{i}.weight", (fan_in, fan_out)))
        out.append((f"{prefix}.{i}.bias", (fan_out,)))
    return out


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Name and shape of every parameter tensor, in checkpoint directory order."""
    d = config.embed_dim
    k = config.cnn_kernel_size
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("patch_projection", (config.patch_dim, d)),
        ("positional_embeddings", (config.num_patches, d)),
        ("object_queries", (config.num_queries, d)),
    ]
    c_in = config.image_channels
    for s, c_out in enumerate(config.cnn_stages[0]):
        shapes.append((f"cnn.{s}.weight", (c_out, c_in, k, k)))
        shapes.append((f"cnn.{s}.bias", (c_out,)))
        c_in = c_out
    shapes += [("fusion.weight", (2 * d, d)), ("fusion.bias", (d,))]
    for n in range(config.num_layers):
        pre = f"layers.{n}"
        shapes += [(f"{pre}.ln1.gamma", (d,)), (f"{pre}.ln1.beta", (d,))]
        for name in ("wq", "wk", "wv", "wo"):
            shapes += [(f"{pre}.attn.{name}", (d, d)), (f"{pre}.attn.b{name[1]}", (d,))]
        shapes += [(f"{pre}.ln2.gamma", (d,)), (f"{pre}.ln2.beta", (d,))]
        shapes += _mlp_shapes(f"{pre}.mlp", [d, *config.mlp_hidden_dims, d])
    shapes += [("final_ln.gamma", (d,)), ("final_ln.beta", (d,))]
    shapes += _mlp_shapes("class_head", [d, *config.head_hidden_dims, config.num_classes + 1])
    shapes += _mlp_shapes("box_head", [d, *config.head_hidden_dims, 4])
    return shapes


def count_parameters(config: ModelConfig) -> int:
    """Closed-form scalar count of all learnable parameters."""
    d, k = config.embed_dim, config.cnn_kernel_size
    g1, g2 = config.head_hidden_dims
    m1, m2 = config.mlp_hidden_dims

    def ffn(i, a, b, o):
        return i * a + a + a * b + b + b * o + o

    total = config.patch_dim * d + config.num_patches * d + config.num_queries * d
    c_in = config.image_channels
    for c_out in config.cnn_stages[0]:
        total += c_out * c_in * k * k + c_out
        c_in = c_out
    total += 2 * d * d + d
    per_layer = 4 * d + 4 * (d * d + d) + ffn(d, m1, m2, d)
    total += config.num_layers * per_layer
    total += 2 * d
    total += ffn(d, g1, g2, config.num_classes + 1) + ffn(d, g1, g2, 4)
    return total


def init_parameters(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit LN gains, N(0, 0.02) queries."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if name == "object_queries":
            data = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gamma":
            data = np.ones(shape)
        elif leaf == "beta" or leaf == "bias" or leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            elif name == "positional_embeddings":
                fan_in = shape[1]
            else:
                fan_in = shape[0]
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# forward pieces


def patchify(image: Tensor, p: int) -> Tensor:
    """C x H x W -> N x (P*P*C); patches row-major over the grid, (channel, row, col) inside."""
    image = T.tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"patchify expects C x H x W, got {image.shape}")
    c, h, w = image.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = T.Reshape.apply(image, shape=(c, gh, p, gw, p))
    x = Permute.apply(x, axes=(1, 3, 0, 2, 4))
    return T.Reshape.apply(x, shape=(gh * gw, c * p * p))


class Permute(T.Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = T.matmul(x, weight)
    return out + bias if bias is not None else out


def embed_patches(patches: Tensor, params: ModelParams) -> Tensor:
    return T.matmul(patches, params["patch_projection"]) + params["positional_embeddings"]


def cnn_features(image: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Stacked conv -> ReLU -> maxpool stages, flattened to N tokens of D features."""
    x = T.tensor(image)
    pad = config.cnn_kernel_size // 2
    for s, pool in enumerate(config.cnn_stages[1]):
        x = T.conv2d(x, params[f"cnn.{s}.weight"], stride=1, padding=pad)
        x = Permute.apply(x, axes=(1, 2, 0)) + params[f"cnn.{s}.bias"]
        x = Permute.apply(T.relu(x), axes=(2, 0, 1))
        x = T.maxpool2d(x, pool, pool)
    d, gh, gw = x.shape
    return T.Reshape.apply(Permute.apply(x, axes=(1, 2, 0)), shape=(gh * gw, d))


def fuse_tokens(x_pe: Tensor, cnn: Tensor, params: ModelParams) -> Tensor:
    if x_pe.shape[0] != cnn.shape[0]:
        raise ShapeError(f"fuse_tokens: {x_pe.shape[0]} patch tokens vs {cnn.shape[0]} CNN tokens")
    return linear(T.concat([x_pe, cnn], axis=1), params["fusion.weight"], params["fusion.bias"])


def assemble_sequence(fused: Tensor, object_queries: Tensor) -> Tensor:
    return T.concat([fused, object_queries], axis=0)


def multi_head_attention(x: Tensor, params: ModelParams, prefix: str, num_heads: int) -> Tensor:
    d = x.shape[1]
    dh = d // num_heads
    q = linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = linear(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    scale = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        weights = T.softmax(T.matmul(q[:, cols], k[:, cols].T) * scale, axis=-1)
        heads.append(T.matmul(weights, v[:, cols]))
    merged = heads[0] if num_heads == 1 else T.concat(heads, axis=1)
    return linear(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def feed_forward(x: Tensor, params: ModelParams, prefix: str, kind: str) -> Tensor:
    n = 0
    while f"{prefix}.{n + 1}.weight" in params:
        x = T.activation(linear(x, params[f"{prefix}.{n}.weight"], params[f"{prefix}.{n}.bias"]), kind)
        n += 1
    return linear(x, params[f"{prefix}.{n}.weight"], params[f"{prefix}.{n}.bias"])


def encoder_layer(y: Tensor, params: ModelParams, index: int, config: ModelConfig) -> Tensor:
    pre = f"layers.{index}"
    eps = config.ln_eps
    normed = T.layer_norm(y, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"], eps)
    y_mid = multi_head_attention(normed, params, f"{pre}.attn", config.num_heads) + y
    normed = T.layer_norm(y_mid, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"], eps)
    return feed_forward(normed, params, f"{pre}.mlp", "gelu") + y_mid


def forward(image, params: ModelParams, config: ModelConfig) -> DetectionOutput:
    image = T.tensor(image)
    expected = (config.image_channels, config.image_height, config.image_width)
    if image.shape != expected:
        raise ShapeError(f"image shape {image.shape} does not match config {expected}")
    x_pe = embed_patches(patchify(image, config.patch_size), params)
    fused = fuse_tokens(x_pe, cnn_features(image, params, config), params)
    y = assemble_sequence(fused, params["object_queries"])
    for n in range(config.num_layers):
        y = encoder_layer(y, params, n, config)
    y = T.layer_norm(y, params["final_ln.gamma"], params["final_ln.beta"], config.ln_eps)
    queries = y[config.num_patches :]
    logits = feed_forward(queries, params, "class_head", "relu")
    boxes = T.sigmoid(feed_forward(queries, params, "box_head", "relu"))
    return DetectionOutput(class_logits=logits, boxes=boxes)
