"""Define-by-run reverse-mode automatic differentiation on numpy arrays.

Every operation records a node on a thread-local tape; ``backward`` replays
the tape in reverse, accumulates gradients additively, and clears it. The
tape is rebuilt on every iteration, which lets structurally different
forward passes coexist in one training loop.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigurationError

DEFAULT_DTYPE = np.float32

_SQRT_GUARD = 1e-12  # keeps sqrt/normalize backward finite at exact zeros


class Node:
    """One recorded operation: input/output handles plus a backward rule."""

    __slots__ = ("op", "inputs", "outputs", "fn")

    def __init__(self, op: str, inputs, outputs, fn: Callable[[], None]):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.fn = fn


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_STATE = _ThreadState()


def active_tape() -> Tape:
    """The calling thread's tape (each thread owns exactly one)."""
    return _STATE.tape


def grad_enabled() -> bool:
    return _STATE.grad_enabled


class no_grad:
    """Context manager: operations inside are not recorded on the tape."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class Tensor:
    """Dense array with optional gradient storage.

    Data is float32 by default; float64 inputs are kept as-is so the
    gradient-check harness can run in double precision.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype)
        else:
            t.grad += g.astype(t.data.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(op: str, data: np.ndarray, inputs: tuple, fn: Callable[[], None]) -> Tensor:
    # intermediate grads stay None until backward reaches them, so forward
    # passes allocate nothing and dead branches cost nothing to replay
    track = _STATE.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    if track:
        _STATE.tape.record(Node(op, inputs, (out,), fn))
    return out


def backward(loss: Tensor):
    """Populate .grad for everything the loss depends on; clears the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = _STATE.tape
    try:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.ones_like(loss.data)
            else:
                loss.grad += np.ones_like(loss.data)
            for node in reversed(tape.nodes):
                if all(o.grad is None for o in node.outputs):
                    continue
                node.fn()
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_data = a.data + b.data

    def fn():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out = _make("add", out_data, (a, b), fn)
    return out


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_data = a.data - b.data

    def fn():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out = _make("sub", out_data, (a, b), fn)
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_data = a.data * b.data

    def fn():
        g = out.grad
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out = _make("mul", out_data, (a, b), fn)
    return out


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_data = a.data / b.data

    def fn():
        g = out.grad
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))

    out = _make("div", out_data, (a, b), fn)
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def fn():
        _accumulate(x, out.grad * (x.data > 0))

    out = _make("relu", out_data, (x,), fn)
    return out


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes where x >= floor."""
    out_data = np.maximum(x.data, floor)

    def fn():
        _accumulate(x, out.grad * (x.data >= floor))

    out = _make("maximum", out_data, (x,), fn)
    return out


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def fn():
        _accumulate(x, out.grad / (2.0 * np.maximum(out_data, _SQRT_GUARD)))

    out = _make("sqrt", out_data, (x,), fn)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def fn():
        _accumulate(x, out.grad.reshape(x.shape))

    out = _make("reshape", out_data, (x,), fn)
    return out


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def fn():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    out = _make("sum", np.asarray(out_data), (x,), fn)
    return out


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def fn():
        g = out.grad / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    out = _make("mean", np.asarray(out_data), (x,), fn)
    return out


def log_sum_exp(x: Tensor, axis: int) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(total), axis=axis)

    def fn():
        g = np.expand_dims(out.grad, axis)
        _accumulate(x, g * (shifted / total))

    out = _make("log_sum_exp", out_data, (x,), fn)
    return out


# ---------------------------------------------------------------------------
# linear algebra / indexing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def fn():
        g = out.grad
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    out = _make("matmul", out_data, (a, b), fn)
    return out


def gather_rows(x: Tensor, idx) -> Tensor:
    """out[i] = x[i, idx[i]] for a 2-D tensor and integer index vector."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.shape[0])
    out_data = x.data[rows, idx]

    def fn():
        g = np.zeros_like(x.data)
        g[rows, idx] = out.grad
        _accumulate(x, g)

    out = _make("gather_rows", out_data, (x,), fn)
    return out


def take_batch(x: Tensor, indices) -> Tensor:
    """Reorder (or repeat) instances along the leading axis."""
    indices = np.asarray(indices, dtype=np.intp)
    out_data = x.data[indices]

    def fn():
        g = np.zeros_like(x.data)
        np.add.at(g, indices, out.grad)
        _accumulate(x, g)

    out = _make("take_batch", out_data, (x,), fn)
    return out


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm.

    The norm is floored at ``eps`` so zero vectors map to zero instead of
    NaN; inputs with norm above the floor come out exactly unit length.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out_data = x.data / denom

    def fn():
        g = out.grad
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        gx = np.where(norm > eps, (g - out_data * inner) / denom, g / eps)
        _accumulate(x, gx)

    out = _make("l2_normalize", out_data, (x,), fn)
    return out


# ---------------------------------------------------------------------------
# spatial ops


def global_average_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"global_average_pool expects B,C,H,W, got {x.shape}")
    b, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def fn():
        g = out.grad[:, :, None, None] / (h * w)
        _accumulate(x, np.broadcast_to(g, x.shape))

    out = _make("global_average_pool", out_data, (x,), fn)
    return out


def channel_stats(x: Tensor, eps: float = 1e-6):
    """Per-instance, per-channel mean and std of a B,C,H,W feature map.

    Uses the population variance over the H*W positions; eps is added
    inside the square root so zero-variance channels stay differentiable.
    Returns (mu[B,C], sigma[B,C]), both on the tape.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"channel_stats expects B,C,H,W, got {x.shape}")
    # eps == 0 is allowed for exactness checks; backward then relies on the
    # sqrt guard.
    eps = max(float(eps), 0.0)
    b, c, h, w = x.shape
    n = h * w
    mu_data = x.data.mean(axis=(2, 3))
    centered = x.data - mu_data[:, :, None, None]
    var = (centered * centered).mean(axis=(2, 3))
    sigma_data = np.sqrt(var + eps)

    track = _STATE.grad_enabled and x.requires_grad
    mu = Tensor.__new__(Tensor)
    mu.data, mu.requires_grad = mu_data, track
    mu.grad = np.zeros_like(mu_data) if track else None
    sigma = Tensor.__new__(Tensor)
    sigma.data, sigma.requires_grad = sigma_data, track
    sigma.grad = np.zeros_like(sigma_data) if track else None

    if track:
        def fn():
            gx = 0.0
            if mu.grad is not None:
                gx = gx + mu.grad[:, :, None, None] / n
            if sigma.grad is not None:
                safe_sigma = np.maximum(sigma_data, _SQRT_GUARD)[:, :, None, None]
                gx = gx + sigma.grad[:, :, None, None] * centered / (n * safe_sigma)
            _accumulate(x, np.broadcast_to(gx, x.shape))

        _STATE.tape.record(Node("channel_stats", (x,), (mu, sigma), fn))
    return mu, sigma


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0, relu: bool = False) -> Tensor:
    """2-D cross-correlation over B,Cin,H,W with Cout,Cin,kh,kw weights.

    ``relu=True`` fuses the activation into the kernel (one less pass over
    the output); the backward rule applies the activation mask first.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError(
            f"conv2d expects 4-D input/kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ConfigurationError(
            f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ConfigurationError(
            f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1:
        raise ConfigurationError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ConfigurationError(
            f"conv2d kernel {kh}x{kw} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")
    dtype = np.result_type(x.data, kernel.data, bias.data)
    kernel_data = kernel.data.astype(dtype, copy=False)
    out_data, padded = _kernels.conv2d_forward(
        x.data.astype(dtype, copy=False), kernel_data,
        bias.data.astype(dtype, copy=False), stride, padding, relu)

    def fn():
        g = out.grad
        if relu:
            g = g * (out_data > 0)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            _accumulate(kernel, _kernels.conv2d_backward_kernel(
                padded, g, kernel.shape, stride))
        if x.requires_grad:
            _accumulate(x, _kernels.conv2d_backward_input(kernel_data, g,
                                                          x.shape, stride, padding))

    out = _make("conv2d", out_data, (x, kernel, bias), fn)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,Din] @ weight[Din,Dout] + bias[Dout]."""
    return add(matmul(x, weight), bias)
