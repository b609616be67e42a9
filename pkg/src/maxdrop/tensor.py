"""Dense numpy-backed tensors with reverse-mode differentiation.

Every differentiable op appends a node to the tape (a monotonically numbered
record of executed ops). :func:`backward` replays the nodes reachable from the
loss in exact reverse execution order, accumulating gradients additively.

Image tensors are row-major ``N, C, H, W``.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class TapeNode:
    """One executed op: its inputs, output, and the rule mapping dOut to dInputs."""

    seq: int
    name: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    output: Optional["Tensor"] = field(default=None, repr=False)


class Tensor:
    """An ndarray plus gradient bookkeeping.

    ``tracked`` tensors participate in differentiation; after :func:`backward`
    their ``grad`` holds dLoss/dTensor with the same shape as ``data``.
    """

    __array_priority__ = 100

    def __init__(self, data, tracked: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.tracked = bool(tracked)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("mul", elementwise("sub", self, other), -1.0)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)


def _record(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tracked = _grad_enabled and any(t.tracked for t in inputs)
    out = Tensor(out_data, dtype=out_data.dtype)
    if tracked:
        out.tracked = True
        out.node = TapeNode(next(_seq), name, tuple(inputs), backward_fn)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _is_scalar(b) -> bool:
    if isinstance(b, Tensor):
        return False
    return np.ndim(b) == 0


_ELEMENTWISE_KINDS = ("add", "sub", "mul", "div")


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """``a <kind> b`` for equal shapes, or with ``b`` a Python/numpy scalar."""
    if kind not in _ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {_ELEMENTWISE_KINDS}")
    a = as_tensor(a)
    if _is_scalar(b):
        s = a.dtype.type(b)
        if kind == "add":
            return _record("add", a.data + s, [a], lambda g: (g,))
        if kind == "sub":
            return _record("sub", a.data - s, [a], lambda g: (g,))
        if kind == "mul":
            return _record("mul", a.data * s, [a], lambda g: (g * s,))
        return _record("div", a.data / s, [a], lambda g: (g / s,))

    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {kind}: shape mismatch {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    if kind == "add":
        return _record("add", x + y, [a, b], lambda g: (g, g))
    if kind == "sub":
        return _record("sub", x - y, [a, b], lambda g: (g, -g))
    if kind == "mul":
        return _record("mul", x * y, [a, b], lambda g: (g * y, g * x))
    return _record("div", x / y, [a, b], lambda g: (g / y, -g * x / (y * y)))


def multiply(a: Tensor, b) -> Tensor:
    return elementwise("mul", a, b)


def add(a: Tensor, b) -> Tensor:
    return elementwise("add", a, b)


def tensor_sum(t: Tensor) -> Tensor:
    shape = t.shape
    return _record("sum", np.asarray(t.data.sum(), dtype=t.dtype), [t],
                   lambda g: (np.broadcast_to(g, shape).astype(t.dtype),))


def mean(t: Tensor) -> Tensor:
    shape, n = t.shape, t.size
    return _record("mean", np.asarray(t.data.mean(), dtype=t.dtype), [t],
                   lambda g: (np.full(shape, g / n, dtype=t.dtype),))


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    old = t.shape
    return _record("reshape", t.data.reshape(shape), [t], lambda g: (g.reshape(old),))


def flatten(t: Tensor) -> Tensor:
    return reshape(t, (t.shape[0], -1))


def relu(t: Tensor) -> Tensor:
    pos = t.data > 0
    return _record("relu", np.where(pos, t.data, t.dtype.type(0)), [t], lambda g: (g * pos,))


def _check_nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected an N,C,H,W tensor, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, ``kernel`` shaped ``(out_ch, in_ch, kh, kw)``.

    Implemented as im2col + matmul; the backward pass scatters column
    gradients back with one strided add per kernel tap.
    """
    _check_nchw(x, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got shape {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {kc} (input {x.shape}, kernel {kernel.shape})")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent {ho}x{wo} < 1 for input {x.shape}, kernel {kernel.shape}, pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # rows: (n, ho, wo); cols: (c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.tracked else None
        gx = None
        if x.tracked:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk

    return _record("conv2d", out, [x, kernel], backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with the (biased) batch statistics and updates the
    running buffers in place; eval mode normalizes with the running buffers.
    """
    _check_nchw(x, "batchnorm2d")
    n, c = x.shape[:2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must be ({c},), got {gamma.shape}, {beta.shape}")
    dt = x.dtype.type
    if mode == "train":
        if n < 2:
            raise ValueError("batchnorm2d: train mode needs a batch of at least 2 (batch variance of 1 sample is zero)")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    elif mode == "eval":
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    else:
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")

    invstd = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if mode == "eval":
            gx = dxhat * invstd[None, :, None, None]
        else:
            m = x.size // c
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (invstd[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return _record("batchnorm2d", out.astype(x.dtype, copy=False), [x, gamma, beta], backward)


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    _check_nchw(x, "avg_pool2d")
    stride = stride or kernel
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: kernel {kernel} larger than input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    out = win.mean(axis=(4, 5)).astype(x.dtype)
    scale = x.dtype.type(1.0 / (kernel * kernel))

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gs
        return (gx,)

    return _record("avg_pool2d", out, [x], backward)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Mean over H and W, returning ``(N, C)``."""
    _check_nchw(x, "global_avg_pool2d")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3)).astype(x.dtype)
    scale = x.dtype.type(1.0 / (h * w))
    return _record(
        "global_avg_pool2d", out, [x],
        lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),),
    )


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``x`` shaped ``(N, in)`` and ``weight`` ``(in, out)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: incompatible shapes {x.shape} @ {weight.shape}")
    out = x.data @ weight.data
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense: bias shape {bias.shape} does not match output width {weight.shape[1]}")
        out = out + bias.data
        inputs.append(bias)

    def backward(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _record("dense", out, inputs, backward)


def softmax_cross_entropy(logits: Tensor, labels, return_predictions: bool = False):
    """Mean softmax cross-entropy over the batch.

    With ``return_predictions`` also returns the per-example argmax.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, C), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"softmax_cross_entropy: label {bad} out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return ((g / n) * p).astype(logits.dtype, copy=False),

    out = _record("softmax_cross_entropy", loss, [logits], backward)
    if return_predictions:
        return out, logits.data.argmax(axis=1)
    return out


def tape_order(loss: Tensor) -> list[TapeNode]:
    """Nodes reachable from ``loss`` in reverse execution order."""
    nodes: dict[int, TapeNode] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None:
            t.node.output = t
            nodes[t.node.seq] = t.node
            stack.extend(t.node.inputs)
    return [nodes[k] for k in sorted(nodes, reverse=True)]


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dT into ``T.grad`` for every tracked tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.tracked:
        raise ValueError("backward: loss is not tracked (no tracked inputs or recorded under no_grad)")
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    reached: dict[int, Tensor] = {id(loss): loss}
    for node in tape_order(loss):
        out = node.output
        g = pending.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.tracked:
                continue
            gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
                reached[key] = inp
    for key, t in reached.items():
        g = pending[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
