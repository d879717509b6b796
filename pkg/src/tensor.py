"""Minimal dense tensor library with reverse-mode automatic differentiation.

Tensors wrap a numpy array (32-bit by default) plus a gradient buffer that is
present exactly when ``requires_grad`` is set. Every primitive accepts any
number of leading batch axes in front of the trailing dimensions it works on,
so a batch of segments runs through the model as one graph.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, ShapeError

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-5

# Dropout and initialisation both draw from numpy's PCG64 generator.
Rng = np.random.Generator

_state = threading.local()


def make_rng(seed) -> Rng:
    """Create a generator; identical seeds give identical sample streams."""
    return np.random.default_rng(seed)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph (inference and finite differences)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """Dense float array participating in a reverse-mode graph."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "",
        dtype=None,
    ):
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            array = data
        else:
            array = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(array) if self.requires_grad else None
        self._parents = tuple(parents)
        self._backward = backward_fn
        self.op = op

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward_fn: Callable[[np.ndarray], None],
        op: str = "",
    ) -> "Tensor":
        """Build the output node of a primitive.

        The node joins the graph only when a parent requires grad and
        recording is enabled; otherwise it is a plain constant.
        """
        if _grad_enabled() and any(p.requires_grad for p in parents):
            return cls(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
        return cls(data, op=op)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def astype_(self, dtype) -> None:
        """Convert data and grad in place (used by the 64-bit shadow mode)."""
        self.data = np.ascontiguousarray(self.data, dtype=dtype)
        if self.grad is not None:
            self.grad = np.ascontiguousarray(self.grad, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def accumulate_grad(t: Tensor, grad: np.ndarray) -> None:
    """Add ``grad`` into ``t.grad``, summing away broadcast axes."""
    if t.requires_grad:
        t.grad += _unbroadcast(grad, t.shape)


def add(a, b) -> Tensor:
    """Broadcasting addition."""
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add cannot broadcast shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return Tensor.from_op(out, (a, b), backward_fn, "add")


def mul(a, b) -> Tensor:
    """Broadcasting element-wise product."""
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul cannot broadcast shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return Tensor.from_op(out, (a, b), backward_fn, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        accumulate_grad(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        accumulate_grad(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor.from_op(out, (a, b), backward_fn, "matmul")


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    """Swap two axes."""
    out = np.swapaxes(x.data, axis1, axis2)

    def backward_fn(g):
        accumulate_grad(x, np.swapaxes(g, axis1, axis2))

    return Tensor.from_op(out, (x,), backward_fn, "swapaxes")


def transpose_last(x: Tensor) -> Tensor:
    return swapaxes(x, -1, -2)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Reshape, keeping the element count."""
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}")

    def backward_fn(g):
        accumulate_grad(x, g.reshape(x.shape))

    return Tensor.from_op(out, (x,), backward_fn, "reshape")


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward_fn(g):
        accumulate_grad(x, np.broadcast_to(g, x.shape))

    return Tensor.from_op(out, (x,), backward_fn, "sum")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis; ``-inf`` entries map to exactly 0."""
    if np.isneginf(x.data).all(axis=-1).any():
        raise DataError("softmax row is entirely -inf (fully masked row)")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        accumulate_grad(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor.from_op(y, (x,), backward_fn, "softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)

    def backward_fn(g):
        accumulate_grad(x, g - probs * g.sum(axis=-1, keepdims=True))

    return Tensor.from_op(y, (x,), backward_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1] if x.ndim else 0
    if d < 2:
        raise ShapeError(f"layer_norm needs a last axis of at least 2, got {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last axis {d}")
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.data + bias.data

    def backward_fn(g):
        accumulate_grad(gain, g * x_hat)
        accumulate_grad(bias, g)
        if x.requires_grad:
            d_hat = g * gain.data
            dx = inv_std * (
                d_hat
                - d_hat.mean(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
            )
            accumulate_grad(x, dx)

    return Tensor.from_op(out, (x, gain, bias), backward_fn, "layer_norm")


_PADDING_MODES = ("same", "causal", "anticausal")


def conv1d_same(
    x: Tensor, kernels: Tensor, bias: Tensor, k: int, padding: str = "same"
) -> Tensor:
    """Length-preserving 1D convolution (cross-correlation) over the time axis.

    ``x`` is (..., T, C), ``kernels`` is (C_out, C, k). ``padding`` decides
    where the k-1 zero frames go: split evenly ("same"), all before the
    sequence ("causal") or all after it ("anticausal").
    """
    if k % 2 == 0:
        raise ConfigurationError(f"convolution kernel width must be odd, got {k}")
    if padding not in _PADDING_MODES:
        raise ConfigurationError(f"unknown padding mode '{padding}'")
    if x.ndim < 2:
        raise ShapeError(f"conv1d input must be (..., T, C), got {x.shape}")
    c_out = kernels.shape[0]
    if kernels.shape != (c_out, x.shape[-1], k) or bias.shape != (c_out,):
        raise ShapeError(
            f"conv1d kernels {kernels.shape} / bias {bias.shape} incompatible with input {x.shape} and k={k}"
        )

    if padding == "same":
        left = (k - 1) // 2
    elif padding == "causal":
        left = k - 1
    else:
        left = 0
    right = k - 1 - left

    lead = x.shape[:-2]
    T, C = x.shape[-2], x.shape[-1]
    xb = x.data.reshape((-1, T, C))
    padded = np.pad(xb, ((0, 0), (left, right), (0, 0)))
    windows = sliding_window_view(padded, k, axis=1)  # (B, T, C, k)
    out = np.einsum("btcj,ocj->bto", windows, kernels.data) + bias.data
    out = out.reshape(lead + (T, c_out))

    def backward_fn(g):
        gb = g.reshape((-1, T, c_out))
        accumulate_grad(kernels, np.einsum("btcj,bto->ocj", windows, gb))
        accumulate_grad(bias, gb.sum(axis=(0, 1)))
        if x.requires_grad:
            g_windows = np.einsum("bto,ocj->btcj", gb, kernels.data)
            g_padded = np.zeros_like(padded)
            for j in range(k):
                g_padded[:, j:j + T, :] += g_windows[:, :, :, j]
            accumulate_grad(x, g_padded[:, left:left + T, :].reshape(x.shape))

    return Tensor.from_op(out, (x, kernels, bias), backward_fn, "conv1d")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` broadcast over the leading axes of ``x``."""
    if w.ndim != 2 or x.shape[-1:] != w.shape[:1] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    if x.ndim == 1:
        return reshape(add(matmul(reshape(x, (1, x.shape[0])), w), b), (w.shape[1],))
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    """Element-wise ``max(x, 0)``."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)

    def backward_fn(g):
        accumulate_grad(x, g * mask)

    return Tensor.from_op(out, (x,), backward_fn, "relu")


def dropout(x: Tensor, p: float, rng: Optional[Rng], training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return mul(x, keep)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last leading shapes differ: {a.shape} vs {b.shape}")
    split = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def backward_fn(g):
        accumulate_grad(a, g[..., :split])
        accumulate_grad(b, g[..., split:])

    return Tensor.from_op(out, (a, b), backward_fn, "concat")


def _topological_order(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate the grad buffers of every ``requires_grad`` ancestor of ``loss``.

    Leaf gradients accumulate across calls; intermediate buffers are reset on
    each call so a repeated call adds exactly one more gradient to the leaves.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad.fill(0)
    loss.grad += 1
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


@contextmanager
def float64_shadow(tensors: Iterable[Tensor]) -> Iterator[None]:
    """Temporarily run the given leaves in 64-bit precision."""
    saved = [(t, t.data.dtype) for t in tensors]
    for t, _ in saved:
        t.astype_(np.float64)
    try:
        yield
    finally:
        for t, dtype in saved:
            t.astype_(dtype)
