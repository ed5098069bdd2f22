"""Tape-based reverse-mode autodiff over numpy arrays.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one operand requires a gradient. Outside a tape everything runs
as plain numpy, which is what evaluation uses.

Layout is NCHW throughout.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when an op turns finite inputs into NaN/Inf."""


_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)


class Tape:
    """Ordered record of operations; ``backward`` replays it in reverse."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self.nodes.append((out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, root: Tensor, grad: np.ndarray | None = None, retain: bool = False) -> None:
        if id(root) not in self._produced:
            if root.requires_grad:
                g = np.ones_like(root.data) if grad is None else grad
                root.grad = g if root.grad is None else root.grad + g
                return
            raise RuntimeError("root tensor was not recorded on this tape")
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.dtype)
        pending = {id(root): seed}
        for out, inputs, fn in reversed(self.nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if id(t) in self._produced:
                    prev = pending.get(id(t))
                    pending[id(t)] = gi if prev is None else prev + gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        if not retain:
            self.nodes.clear()
            self._produced.clear()


class record_kinks:
    """Collects the ReLU activation masks of every forward pass run inside the block.

    Finite differences are only valid when x+h and x-h share one mask.
    """

    def __enter__(self):
        self.masks: list[np.ndarray] = []
        self._saved = getattr(_local, "kinks", None)
        _local.kinks = self.masks
        return self

    def __exit__(self, *exc):
        _local.kinks = self._saved


class no_grad:
    """Suspends recording for the enclosed block, even under an active tape."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        _tape_stack()[:] = self._saved


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _finish(name: str, out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        finite_in = all(np.all(np.isfinite(t.data)) for t in inputs if isinstance(t, Tensor))
        if finite_in:
            raise NonFiniteError(f"{name} produced non-finite values from finite inputs")
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _finish("add", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _finish("mul", out, (a, b), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _finish("sum", out, (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _finish("reshape", out, (x,), backward)


def index(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _finish("index", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    log = getattr(_local, "kinks", None)
    if log is not None:
        log.append(mask)

    def backward(g):
        return (g * mask,)

    return _finish("relu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects rank-2 input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight in-features {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return _finish("linear", out, inputs, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh} does not fit input {h}x{w} with padding {padding}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    return _finish("conv2d", out, inputs, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional); in eval mode the
    running buffers are used as-is.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects rank-4 input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have length {c}")
    if eps <= 0:
        raise ValueError("batch_norm: epsilon must be positive")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=axes)
        m = x.data.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        xc = x.data - mean[None, :, None, None]
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                m = x.data.size // c
                s1 = gxhat.sum(axis=axes)[None, :, None, None]
                s2 = (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                gx = (inv[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _finish("batch_norm", out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return _finish("global_avg_pool", out, (x,), backward)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping average pooling; output extent is ceil(H/factor).

    A ragged last window averages only the elements it covers, so the map
    stays linear and matches the spatial size of a stride-``factor`` conv
    with padding 1 and kernel 3.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects rank-4 input, got {x.shape}")
    if factor < 1:
        raise ShapeError("avg_pool2d: factor must be >= 1")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    ho, wo = -(-h // factor), -(-w // factor)
    ph, pw = ho * factor - h, wo * factor - w
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw))) if (ph or pw) else x.data
    rows = np.minimum(factor, h - np.arange(ho) * factor)
    cols = np.minimum(factor, w - np.arange(wo) * factor)
    counts = (rows[:, None] * cols[None, :]).astype(x.dtype)
    out = xp.reshape(n, c, ho, factor, wo, factor).sum(axis=(3, 5)) / counts

    def backward(g):
        gs = g / counts
        gx = np.repeat(np.repeat(gs, factor, axis=2), factor, axis=3)
        return (np.ascontiguousarray(gx[:, :, :h, :w]),)

    return _finish("avg_pool2d", out, (x,), backward)


def tile_channels(x: Tensor, out_channels: int) -> Tensor:
    """Repeat the channel axis cyclically, then truncate to ``out_channels``."""
    c = x.shape[1]
    if out_channels == c:
        return x
    idx = np.arange(out_channels) % c
    out = np.ascontiguousarray(x.data[:, idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _finish("tile_channels", out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects rank-2 logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label index out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    out = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((g / n) * p,)

    return _finish("softmax_cross_entropy", out, (logits,), backward)
