"""Minimal dense tensor with reverse-mode automatic differentiation.

Every op is a :class:`Function` subclass with a numpy ``forward`` and a
``backward`` that maps the output gradient to one gradient per input.
Data is always float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from tomformer.errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Function",
    "tensor",
    "matmul",
    "conv2d",
    "maxpool2d",
    "layer_norm",
    "softmax",
    "log_softmax",
    "activation",
    "relu",
    "gelu",
    "sigmoid",
    "concat",
    "split",
    "backward",
    "topological_order",
    "finite_diff_check",
]


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


class Tensor:
    """Dense float64 array that can take part in a differentiation graph."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _ctx: "Function | None" = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._ctx = _ctx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return Transpose.apply(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(self, other)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(tensor(other), self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(self, other)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(tensor(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None) -> "Tensor":
        return Sum.apply(self, axis=axis)

    def mean(self, axis=None) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return Sum.apply(self, axis=axis) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)


def tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)


class Function:
    """A differentiable operation node.

    ``apply`` runs ``forward`` on raw arrays and, if any input needs a
    gradient, records the node on the output tensor.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    @classmethod
    def apply(cls, *args, **kwargs) -> Tensor:
        inputs = tuple(tensor(a) for a in args)
        ctx = cls(*inputs)
        out = ctx.forward(*(t.data for t in inputs), **kwargs)
        needs_grad = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=needs_grad, _ctx=ctx if needs_grad else None)

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # Only same shape, scalar, or a bias vector over the trailing axis.
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "sub")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), -_unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "div")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Maximum(Function):
    """Elementwise max of two same-shape tensors; ties send gradient to the first."""

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
        self.mask = a >= b
        return np.where(self.mask, a, b)

    def backward(self, grad):
        return grad * self.mask, grad * ~self.mask


class Minimum(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
        self.mask = a <= b
        return np.where(self.mask, a, b)

    def backward(self, grad):
        return grad * self.mask, grad * ~self.mask


def maximum(a, b) -> Tensor:
    return Maximum.apply(a, b)


def minimum(a, b) -> Tensor:
    return Minimum.apply(a, b)


# ---------------------------------------------------------------------------
# shape manipulation


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
        return a.T.copy()

    def backward(self, grad):
        return (grad.T,)


class GetItem(Function):
    def forward(self, a, index):
        self.in_shape = a.shape
        self.index = index
        return np.array(a[index], dtype=np.float64)

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        np.add.at(out, self.index, grad)
        return (out,)


class Sum(Function):
    def forward(self, a, axis=None):
        self.in_shape = a.shape
        self.axis = axis
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad):
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        if not arrays:
            raise ShapeError("concat: no operands")
        ref = arrays[0]
        ax = axis % ref.ndim
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(
                d != e for i, (d, e) in enumerate(zip(arr.shape, ref.shape)) if i != ax
            ):
                raise ShapeError(f"concat: shapes {ref.shape} and {arr.shape} differ off axis {axis}")
        self.axis = ax
        self.bounds = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of :func:`concat`: cut ``x`` into consecutive pieces of ``sizes``."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not add up to extent {x.shape[axis]}")
    pieces, start = [], 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        pieces.append(x[tuple(index)])
        start += size
    return pieces


# ---------------------------------------------------------------------------
# linear algebra and convolution


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


class Conv2d(Function):
    """Cross-correlation of a C_in x H x W input with C_out x C_in x k x k kernels."""

    def forward(self, x, w, stride=1, padding=0):
        if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {w.shape}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
        c_in, h, wd = x.shape
        k = w.shape[2]
        if k > h + 2 * padding or k > wd + 2 * padding:
            raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {x.shape} (padding {padding})")
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
        # cols: C_in x H' x W' x k x k
        cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        self.cols = cols
        self.w = w
        self.stride, self.padding = stride, padding
        self.padded_shape = xp.shape
        self.in_shape = x.shape
        return np.einsum("chwij,ocij->ohw", cols, w, optimize=True)

    def backward(self, grad):
        k = self.w.shape[2]
        s = self.stride
        gw = np.einsum("ohw,chwij->ocij", grad, self.cols, optimize=True)
        gxp = np.zeros(self.padded_shape)
        ho, wo = grad.shape[1:]
        # (C_in, H', W', k, k) contribution of each output cell
        contrib = np.einsum("ohw,ocij->chwij", grad, self.w, optimize=True)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + s * ho : s, j : j + s * wo : s] += contrib[:, :, :, i, j]
        p = self.padding
        gx = gxp[:, p : p + self.in_shape[1], p : p + self.in_shape[2]] if p else gxp
        return gx, gw


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, kernels, stride=stride, padding=padding)


class MaxPool2d(Function):
    def forward(self, x, k, stride):
        if x.ndim != 3:
            raise ShapeError(f"maxpool2d expects C x H x W, got {x.shape}")
        c, h, w = x.shape
        if k > h or k > w or k < 1 or stride < 1:
            raise ShapeError(f"maxpool2d: window {k} (stride {stride}) exceeds input {x.shape}")
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        ho, wo = win.shape[1:3]
        flat = win.reshape(c, ho, wo, k * k)
        # np.argmax returns the first maximum in row-major window order
        arg = flat.argmax(axis=-1)
        self.in_shape = x.shape
        ci, hi, wi = np.indices((c, ho, wo))
        self.src = (ci, hi * stride + arg // k, wi * stride + arg % k)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        gx = np.zeros(self.in_shape)
        np.add.at(gx, self.src, grad)
        return (gx,)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    return MaxPool2d.apply(x, k=k, stride=k if stride is None else stride)


# ---------------------------------------------------------------------------
# normalization and nonlinearities


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        if eps < 0:
            raise ContractError("layer_norm: eps must be non-negative")
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match features {d}")
        mean = x.mean(axis=-1, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv_std
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        lead = tuple(range(grad.ndim - 1))
        g_gamma = (grad * self.xhat).sum(axis=lead)
        g_beta = grad.sum(axis=lead)
        gx_hat = grad * self.gamma
        gx = self.inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - self.xhat * (gx_hat * self.xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class Softmax(Function):
    def forward(self, x, axis=-1):
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = z / z.sum(axis=axis, keepdims=True)
        self.axis = axis
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.probs = np.exp(out)
        self.axis = axis
        return out

    def backward(self, grad):
        return (grad - self.probs * grad.sum(axis=self.axis, keepdims=True),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class GELU(Function):
    """Exact GELU, x * Phi(x)."""

    def forward(self, x):
        self.x = x
        self.cdf = ndtr(x)
        return x * self.cdf

    def backward(self, grad):
        pdf = np.exp(-0.5 * self.x * self.x) / math.sqrt(2.0 * math.pi)
        return (grad * (self.cdf + self.x * pdf),)


class Sigmoid(Function):
    def forward(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


_ACTIVATIONS = {"relu": ReLU, "gelu": GELU, "sigmoid": Sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn.apply(x)


# ---------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Return every graph tensor reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._ctx.inputs, node._ctx.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``."""
    if not 0 < eps <= 1e-2:
        raise ContractError(f"finite_diff_check: eps={eps} outside (0, 1e-2]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(Tensor(base.copy())).item()
        flat[i] = orig - eps
        down = f(Tensor(base.copy())).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * eps)
    if base.size == 0:
        return 0.0
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(rel.max())


def leaves(root: Tensor) -> Iterable[Tensor]:
    return (t for t in topological_order(root) if t._ctx is None)
