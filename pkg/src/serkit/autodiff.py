"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operation set the classifier needs. Each op computes its
forward value eagerly with numpy and records a closure holding whatever the
backward rule requires; ``backward(loss)`` topologically sorts the recorded
graph and accumulates gradients into every ``requires_grad`` leaf. A graph
is single-use: the second ``backward`` through it raises ``GraphConsumed``.

Conventions fixed here so backward is deterministic: ReLU's subgradient at
0 is 0; max-pool ties route to the first element in row-major window order;
dropout is "inverted" (survivors scaled by 1/(1-p)); batch-norm uses
population variance, also in its running statistics.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import (
    BatchTooSmall,
    GraphConsumed,
    LabelOutOfRange,
    NotScalar,
    ShapeMismatch,
)

# Ops with a backward rule; the gradient-check harness must cover all of these.
DIFFERENTIABLE_OPS = (
    "add", "mul", "scale", "sum", "mean", "transpose", "reshape", "concat",
    "matmul", "linear", "relu", "softmax", "layer_norm", "batch_norm2d",
    "dropout", "maxpool2d", "conv2d", "cross_entropy",
)

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording (eval-mode forwards stay allocation-light)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional real array, optionally tracked by the autodiff graph."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.result_type(values, np.float32))
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(values, parents, backward) -> Tensor:
    """Build the result tensor, attaching the backward rule if recording."""
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from loss."""
    if loss.ndim != 0:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumed("this graph has already been backpropagated")

    topo, visited = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None or p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.values.shape:
                raise ShapeMismatch(
                    f"gradient shape {g.shape} != parameter shape {parent.values.shape}")
            parent.grad = g if parent.grad is None else parent.grad + g
        node._backward = None
        if node._parents:  # interior node: free its gradient buffer
            node.grad = None
            node._parents = ()
    loss._consumed = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise and structural ops ---------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values + b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values * b.values

    def bwd(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record(out, (a, b), bwd)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    return _record(x.values * c, (x,), lambda g: (g * c,))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    return _record(x.values.sum(), (x,), lambda g: (np.full_like(x.values, g),))


def mean(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    n = x.shape[axis]

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _record(x.values.mean(axis=axis), (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape
    return _record(x.values.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), bwd)


# --- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; stacked (batched) operands must share leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs >= 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dims disagree: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"batch dims disagree: {a.shape} @ {b.shape}")

    def bwd(g):
        return g @ np.swapaxes(b.values, -1, -2), np.swapaxes(a.values, -1, -2) @ g

    return _record(a.values @ b.values, (a, b), bwd)


def linear(x, w, b) -> Tensor:
    """Affine map on the last axis: x @ w + b."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    d_in, d_out = w.shape
    if x.shape[-1] != d_in or b.shape != (d_out,):
        raise ShapeMismatch(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    x2 = x.values.reshape(-1, d_in)
    out = (x2 @ w.values + b.values).reshape(x.shape[:-1] + (d_out,))

    def bwd(g):
        g2 = g.reshape(-1, d_out)
        return (g2 @ w.values.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _record(out, (x, w, b), bwd)


# --- activations and normalization -----------------------------------------

def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0  # subgradient at 0 is 0
    # maximum rather than where(mask, ...): NaN input must stay NaN so a
    # poisoned batch surfaces as a non-finite loss instead of training on
    # silently zeroed activations
    return _record(np.maximum(x.values, 0.0), (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (x,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis (population variance), then scale/shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv

    def bwd(g):
        red = tuple(range(x.ndim - 1))
        dxhat = g * gamma.values
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(gamma.values * xhat + beta.values, (x, gamma, beta), bwd)


def batch_norm2d(x, gamma, beta, running_mean, running_var,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5,
                 steps: Tensor | None = None) -> Tensor:
    """Per-channel standardization of an N x C x H x W tensor.

    Training mode uses the batch's population statistics and updates the
    running buffers in place; eval mode reads the buffers. The buffers are
    plain tensors that never receive gradients. When a ``steps`` counter is
    supplied, the very first training batch copies its statistics into the
    buffers exactly (exponential decay starts from the second batch), so
    eval mode is usable from the first epoch even at tiny batch counts.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeMismatch(f"batch_norm2d expects N x C x H x W, got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("gamma/beta must have one entry per channel")
    shape = (1, c, 1, 1)

    if training:
        if n < 2:
            raise BatchTooSmall("batch norm needs N >= 2 in training mode")
        mu = x.values.mean(axis=(0, 2, 3))
        var = x.values.var(axis=(0, 2, 3))
        warm_start = steps is not None and float(steps.values) == 0.0
        blend = 1.0 if warm_start else momentum
        running_mean.values *= (1.0 - blend)
        running_mean.values += blend * mu
        running_var.values *= (1.0 - blend)
        running_var.values += blend * var
        if steps is not None:
            steps.values += 1.0
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.values - mu.reshape(shape)) * inv.reshape(shape)
        m = x.size // c  # reduction size per channel

        def bwd(g):
            dxhat = g * gamma.values.reshape(shape)
            mean_dxhat = dxhat.sum(axis=(0, 2, 3)) / m
            mean_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)) / m
            dx = inv.reshape(shape) * (dxhat - mean_dxhat.reshape(shape)
                                       - xhat * mean_dxhat_xhat.reshape(shape))
            return (dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)),
                    None, None)
    else:
        inv = 1.0 / np.sqrt(running_var.values + eps)
        xhat = (x.values - running_mean.values.reshape(shape)) * inv.reshape(shape)

        def bwd(g):
            dx = g * (gamma.values * inv).reshape(shape)
            return (dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)),
                    None, None)

    out = gamma.values.reshape(shape) * xhat + beta.values.reshape(shape)
    return _record(out, (x, gamma, beta, running_mean, running_var), bwd)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng stream")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.values * keep, (x,), lambda g: (g * keep,))


# --- spatial ops ------------------------------------------------------------

def _corr2d(xp: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of padded input (N,C,H,W) with kernel (O,C,m,n)."""
    n, c, h, w = xp.shape
    o, _, m, kn = k.shape
    ho, wo = h - m + 1, w - kn + 1
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (n, c, m, kn, ho, wo), (s[0], s[1], s[2], s[3], s[2], s[3]))
    cols = cols.reshape(n, c * m * kn, ho * wo)
    out = k.reshape(o, c * m * kn) @ cols  # (n, o, ho*wo) via stacked matmul
    return out.reshape(n, o, ho, wo), cols


def conv2d(x, kernel, bias=None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation: Y(i,j) = sum_{p,q} X(i+p, j+q) * K(p,q),
    summed over input channels, plus one bias per output channel.

    Accepts C x H x W (single item) or N x C x H x W input.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    squeeze = x.ndim == 3
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    co, ci, m, kn = kernel.shape
    if xv.shape[1] != ci:
        raise ShapeMismatch(f"input has {xv.shape[1]} channels, kernel expects {ci}")
    if xv.shape[2] + 2 * padding < m or xv.shape[3] + 2 * padding < kn:
        raise ShapeMismatch("kernel larger than padded input")

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out, cols = _corr2d(xp, kernel.values)
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeMismatch(f"bias shape {bias.shape} != ({co},)")
        out = out + bias.values.reshape(1, co, 1, 1)
        parents.append(bias)

    def bwd(g):
        if squeeze:
            g = g[None]
        gn, _, ho, wo = g.shape
        g2 = g.reshape(gn, co, ho * wo)
        dk = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        # dX = correlation of the padded upstream gradient with the kernel
        # rotated 180 degrees and with in/out channels swapped.
        k_rot = kernel.values[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gp = np.pad(g, ((0, 0), (0, 0), (m - 1, m - 1), (kn - 1, kn - 1)))
        dxp, _ = _corr2d(np.ascontiguousarray(gp), np.ascontiguousarray(k_rot))
        h, w = xv.shape[2], xv.shape[3]
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        if squeeze:
            dx = dx[0]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _record(out[0] if squeeze else out, tuple(parents), bwd)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped.

    Gradient routes to the argmax cell, first-in-row-major on ties.
    """
    x = _as_tensor(x)
    squeeze = x.ndim == 3
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects (N,)C x H x W, got {x.shape}")
    n, c, h, w = xv.shape
    if h < 2 or w < 2:
        raise ShapeMismatch(f"spatial dims must be >= 2, got {h} x {w}")
    ho, wo = h // 2, w // 2
    win = xv[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if squeeze:
            g = g[None]
        dwin = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = np.zeros_like(xv)
        dx[:, :, :2 * ho, :2 * wo] = (
            dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, 2 * ho, 2 * wo))
        return (dx[0] if squeeze else dx,)

    return _record(out[0] if squeeze else out, (x,), bwd)


# --- loss -------------------------------------------------------------------

def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], fused for stability."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    z = logits.values
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()

    def bwd(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record(np.asarray(loss, dtype=z.dtype), (logits,), bwd)
