"""Small reverse-mode autodiff engine over numpy float32 arrays.

Images use NHWC layout and convolution kernels use (kh, kw, cin, cout).
Every op records its parents and a closure that maps the output gradient
to parent gradients; ``backward`` walks the graph in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

_state = threading.local()   # graph recording is a per-thread switch
_node_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised when backward is called on something that is not a scalar loss."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "node_id", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64 or not isinstance(data, np.ndarray):
            # float64 is kept only when handed in explicitly (finite-difference checks)
            arr = arr.astype(DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self.node_id = next(_node_counter)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @classmethod
    def from_op(cls, out: np.ndarray, parents: Iterable[Tensor], op: str,
                backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        """Wrap an op result, attaching it to the graph when any parent needs a gradient."""
        parents = tuple(parents)
        t = cls(out, dtype=out.dtype)
        t.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t.parents = parents
            t._backward = backward_fn
        return t

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` sorted by creation order (a valid topological order)."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(p for p in t.parents if p.requires_grad)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every node reachable from ``loss``.

    Returns a map from node id to gradient array. Leaf gradients accumulate
    into any gradient already present on the leaf.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(node.node_id)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op}: gradient shape {pg.shape} != {parent.shape}")
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return Tensor.from_op(out, (a, b), "add",
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return Tensor.from_op(out, (a, b), "mul",
                          lambda g: (_unbroadcast(g * b.data, a.shape),
                                     _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), "neg", lambda g: (-g,))


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return Tensor.from_op(out, (a,), "sum", lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n, dtype=a.data.dtype)
    return Tensor.from_op(out, (a,), "mean",
                          lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor.from_op(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return Tensor.from_op(a.data * f, (a,), "scale", lambda g: (g * f,))


# activations

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return Tensor.from_op(out, (x,), "relu", lambda g: (g * (out > 0),))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return Tensor.from_op(s, (x,), "sigmoid", lambda g: (g * s * (1 - s),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(s, (x,), "softmax", bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return Tensor.from_op(out, (x,), "log_softmax",
                          lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


# layers

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match {w.shape[1]} units")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor.from_op(out, parents, "dense", bw)


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation, NHWC input, (kh, kw, cin, cout) kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NHWC, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (kh, kw, cin, cout), got {w.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    n, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if cin != c:
        raise ShapeError(f"conv2d: input channels (axis 3) = {c} but kernel cin (axis 2) = {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(wd, kw, stride)
    else:
        pt = pb = pl = pr = 0
        if h < kh or wd < kw:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd} (axes 1, 2)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    dt = x.data.dtype
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    cols2 = cols.reshape(n * ho * wo, kh * kw * c)
    w2 = w.data.reshape(kh * kw * c, cout)
    out = cols2 @ w2
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=dt)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride, :] += (g2 @ w.data[i, j].T).reshape(n, ho, wo, c)
            gx = dxp[:, pt:pt + h, pl:pl + wd, :]
            gx = np.ascontiguousarray(gx)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor.from_op(out, parents, "conv2d", bw)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; a trailing odd row/column is dropped."""
    if window != 2:
        raise ValueError("maxpool2d supports window=2 only")
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be NHWC, got {x.shape}")
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2d: spatial dims {h}x{w} too small for 2x2 window")
    xc = x.data[:, :2 * h2, :2 * w2, :]
    quads = [xc[:, 0::2, 0::2], xc[:, 0::2, 1::2], xc[:, 1::2, 0::2], xc[:, 1::2, 1::2]]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        free = np.ones(out.shape, dtype=bool)
        # first maximal cell in row-major block order receives the gradient
        for q, (di, dj) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = free & (q == out)
            gx[:, di:2 * h2:2, dj:2 * w2:2] = np.where(hit, g, 0)
            free &= ~hit
        return (gx,)

    return Tensor.from_op(out, (x,), "maxpool2d", bw)


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by 2 along H and W."""
    if factor != 2:
        raise ValueError("upsample2d supports factor=2 only")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return Tensor.from_op(out, (x,), "upsample2d",
                          lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


class BatchNormState:
    """Running moments for one batchnorm layer (mutable layer buffer, not a graph node)."""

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None = None,
              training: bool = True, eps: float = 1e-5, momentum: float = 0.99) -> Tensor:
    """Per-channel normalization over every axis but the last (NHWC or B x F)."""
    axes = tuple(range(x.data.ndim - 1))
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    if state is not None:
        eps, momentum = state.eps, state.momentum
    dt = x.data.dtype
    if training:
        m = x.data.size // c
        if m < 1:
            raise ShapeError("batchnorm: empty batch")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            state.running_mean = (momentum * state.running_mean + (1 - momentum) * mu).astype(DTYPE)
            state.running_var = (momentum * state.running_var + (1 - momentum) * var).astype(DTYPE)
    else:
        if state is None:
            raise ValueError("batchnorm: inference mode needs running moments")
        mu = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            m = x.data.size // c
            gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx.astype(dt), gg, gb

    return Tensor.from_op(out.astype(dt), (x, gamma, beta), "batchnorm", bw)


def dropout(x: Tensor, rate: float, training: bool = True,
            seed: int | np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so inference is the identity."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1], got {rate}")
    if not training or rate == 0.0:
        return x
    dt = x.data.dtype
    if rate == 1.0:
        mask = np.zeros(x.shape, dtype=dt)
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        keep = rng.random(x.shape) >= rate
        mask = keep.astype(dt) / dt.type(1.0 - rate)
    return Tensor.from_op(x.data * mask, (x,), "dropout", lambda g: (g * mask,))
