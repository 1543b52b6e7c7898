"""Finite-difference verification of every backward rule.

Each differentiable op is wrapped in a scalar loss (a fixed random weighting
of its output) and its analytic gradients are compared against central
differences at double precision. The relative error for a tensor is

    max|ad - fd| / max(max|ad|, max|fd|, 1e-8)

so the comparison is scaled by the largest gradient magnitude present.
Builders must produce losses that are pure functions of their tensor
arguments (any randomness re-derived from a fixed key inside the closure),
otherwise the two finite-difference evaluations would not be comparable.

A second check differentiates the full tiny classifier end to end, sampling
a few coordinates of every named parameter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DIFFERENTIABLE_OPS, Tensor, backward
from .model import ArchConfig, clone_params, forward, init_params
from .rng import STREAM_DROPOUT, DropoutStreams, derived_rng

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
FD_STEP = 1e-6


@dataclass(frozen=True)
class OpCheckResult:
    op: str
    trials: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


@dataclass(frozen=True)
class ModelCheckResult:
    max_rel_err: float
    tolerance: float
    n_coordinates: int
    worst_tensor: str

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


@dataclass(frozen=True)
class GradCheckReport:
    ops: tuple[OpCheckResult, ...]
    model: ModelCheckResult
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.ops) and self.model.passed


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _fd_gradient(loss_fn, arrays: list[np.ndarray], which: int) -> np.ndarray:
    """Central differences of loss_fn w.r.t. arrays[which], all coordinates."""
    x = arrays[which]
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        idx = np.unravel_index(i, x.shape)
        bumped = [a.copy() for a in arrays]
        bumped[which][idx] += FD_STEP
        up = loss_fn([Tensor(a) for a in bumped])
        bumped = [a.copy() for a in arrays]
        bumped[which][idx] -= FD_STEP
        down = loss_fn([Tensor(a) for a in bumped])
        flat[i] = (float(up.values) - float(down.values)) / (2.0 * FD_STEP)
    return grad


def _check_builder(build, trials: int, seed: int, op_index: int) -> float:
    worst = 0.0
    for trial in range(trials):
        rng = derived_rng(seed, 100 + op_index, trial)
        loss_fn, arrays = build(rng)
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        backward(loss_fn(leaves))
        for i, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
            numeric = _fd_gradient(loss_fn, arrays, i)
            worst = max(worst, _rel_err(analytic, numeric))
    return worst


# --- input builders -----------------------------------------------------------

def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, Tensor(w)))


def _shrink_axes(shape, rng) -> tuple[int, ...]:
    """A shape broadcastable against ``shape`` (some axes collapsed to 1)."""
    if rng.random() < 0.25:
        return shape
    out = tuple(1 if rng.random() < 0.5 else s for s in shape)
    return out if rng.random() < 0.8 else out[1:]  # also drop a leading axis


def _build_add(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    other = _shrink_axes(shape, rng)
    w = rng.normal(size=shape)
    a, b = rng.normal(size=shape), rng.normal(size=other)
    return (lambda ts: _weighted(ad.add(ts[0], ts[1]), w)), [a, b]


def _build_mul(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    other = _shrink_axes(shape, rng)
    w = rng.normal(size=shape)
    a, b = rng.normal(size=shape), rng.normal(size=other)
    return (lambda ts: _weighted(ad.mul(ts[0], ts[1]), w)), [a, b]


def _build_scale(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    c = float(rng.normal())
    w = rng.normal(size=shape)
    return (lambda ts: _weighted(ad.scale(ts[0], c), w)), [rng.normal(size=shape)]


def _build_sum(rng):
    shape = tuple(int(rng.integers(2, 4)) for _ in range(int(rng.integers(1, 4))))
    c = float(rng.normal())
    return (lambda ts: ad.scale(ad.sum(ts[0]), c)), [rng.normal(size=shape)]


def _build_mean(rng):
    shape = tuple(int(rng.integers(2, 4)) for _ in range(int(rng.integers(2, 4))))
    axis = int(rng.integers(len(shape)))
    out_shape = shape[:axis] + shape[axis + 1:]
    w = rng.normal(size=out_shape)
    return (lambda ts: _weighted(ad.mean(ts[0], axis), w)), [rng.normal(size=shape)]


def _build_transpose(rng):
    shape = tuple(int(rng.integers(2, 4)) for _ in range(int(rng.integers(2, 5))))
    axes = tuple(int(a) for a in rng.permutation(len(shape)))
    w = rng.normal(size=tuple(shape[a] for a in axes))
    return (lambda ts: _weighted(ad.transpose(ts[0], axes), w)), [rng.normal(size=shape)]


def _build_reshape(rng):
    m, n = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    new_shape = (n, m) if rng.random() < 0.5 else (m * n,)
    w = rng.normal(size=new_shape)
    return (lambda ts: _weighted(ad.reshape(ts[0], new_shape), w)), [rng.normal(size=(m, n))]


def _build_concat(rng):
    parts = int(rng.integers(2, 4))
    axis = int(rng.integers(2))
    base = [int(rng.integers(2, 4)), int(rng.integers(2, 4))]
    shapes = []
    for _ in range(parts):
        s = list(base)
        s[axis] = int(rng.integers(1, 4))
        shapes.append(tuple(s))
    total = list(base)
    total[axis] = sum(s[axis] for s in shapes)
    w = rng.normal(size=tuple(total))
    arrays = [rng.normal(size=s) for s in shapes]
    return (lambda ts: _weighted(ad.concat(ts, axis), w)), arrays


def _build_matmul(rng):
    m, k, n = (int(rng.integers(2, 4)) for _ in range(3))
    if rng.random() < 0.5:
        sa, sb = (m, k), (k, n)
    else:
        b = int(rng.integers(2, 4))
        sa, sb = (b, m, k), (b, k, n)
    w = rng.normal(size=sa[:-2] + (m, n))
    arrays = [rng.normal(size=sa), rng.normal(size=sb)]
    return (lambda ts: _weighted(ad.matmul(ts[0], ts[1]), w)), arrays


def _build_linear(rng):
    d_in, d_out = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    lead = (int(rng.integers(2, 4)),)
    if rng.random() < 0.5:
        lead = lead + (int(rng.integers(2, 4)),)
    w = rng.normal(size=lead + (d_out,))
    arrays = [rng.normal(size=lead + (d_in,)),
              rng.normal(size=(d_in, d_out)),
              rng.normal(size=(d_out,))]
    return (lambda ts: _weighted(ad.linear(ts[0], ts[1], ts[2]), w)), arrays


def _build_relu(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    x = rng.normal(size=shape)
    x += 0.25 * np.sign(x)  # keep every value away from the kink at 0
    w = rng.normal(size=shape)
    return (lambda ts: _weighted(ad.relu(ts[0]), w)), [x]


def _build_softmax(rng):
    shape = (int(rng.integers(2, 4)), int(rng.integers(2, 5)))
    axis = int(rng.integers(2))
    w = rng.normal(size=shape)
    return (lambda ts: _weighted(ad.softmax(ts[0], axis=axis), w)), [rng.normal(size=shape)]


def _build_layer_norm(rng):
    d = int(rng.integers(3, 6))
    lead = (int(rng.integers(2, 4)),)
    if rng.random() < 0.5:
        lead = lead + (int(rng.integers(2, 4)),)
    w = rng.normal(size=lead + (d,))
    arrays = [rng.normal(size=lead + (d,)), rng.normal(size=(d,)), rng.normal(size=(d,))]
    return (lambda ts: _weighted(ad.layer_norm(ts[0], ts[1], ts[2]), w)), arrays


def _build_batch_norm2d(rng):
    n, c = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    h, wd = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    w = rng.normal(size=(n, c, h, wd))
    arrays = [rng.normal(size=(n, c, h, wd)), rng.normal(size=(c,)), rng.normal(size=(c,))]

    def loss_fn(ts):
        # fresh buffers per evaluation; their in-place update is not a loss input
        out = ad.batch_norm2d(ts[0], ts[1], ts[2],
                              Tensor(np.zeros(c)), Tensor(np.ones(c)),
                              training=True)
        return _weighted(out, w)

    return loss_fn, arrays


def _build_dropout(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    p = float(rng.choice([0.2, 0.5]))
    mask_key = int(rng.integers(2 ** 31))
    w = rng.normal(size=shape)

    def loss_fn(ts):
        # identical generator every call, so the mask is constant across evals
        return _weighted(ad.dropout(ts[0], p, training=True,
                                    rng=derived_rng(mask_key)), w)

    return loss_fn, [rng.normal(size=shape)]


def _build_maxpool2d(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, wd = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    # distinct values with gaps far beyond the FD step, so argmax never flips
    x = (rng.permutation(n * c * h * wd).astype(np.float64) + 1.0) * 0.37
    x = x.reshape(n, c, h, wd)
    w = rng.normal(size=(n, c, h // 2, wd // 2))
    return (lambda ts: _weighted(ad.maxpool2d(ts[0]), w)), [x]


def _build_conv2d(rng):
    n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    kh = kw = int(rng.choice([2, 3]))
    h, wd = kh + int(rng.integers(0, 3)), kw + int(rng.integers(0, 3))
    padding = int(rng.integers(0, 2))
    with_bias = bool(rng.random() < 0.5)
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    w = rng.normal(size=(n, co, ho, wo))
    arrays = [rng.normal(size=(n, ci, h, wd)), rng.normal(size=(co, ci, kh, kw))]
    if with_bias:
        arrays.append(rng.normal(size=(co,)))

    def loss_fn(ts):
        bias = ts[2] if with_bias else None
        return _weighted(ad.conv2d(ts[0], ts[1], bias, padding=padding), w)

    return loss_fn, arrays


def _build_cross_entropy(rng):
    n, c = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    labels = rng.integers(0, c, size=n)
    return (lambda ts: ad.cross_entropy(ts[0], labels)), [rng.normal(size=(n, c))]


_BUILDERS = {
    "add": _build_add,
    "mul": _build_mul,
    "scale": _build_scale,
    "sum": _build_sum,
    "mean": _build_mean,
    "transpose": _build_transpose,
    "reshape": _build_reshape,
    "concat": _build_concat,
    "matmul": _build_matmul,
    "linear": _build_linear,
    "relu": _build_relu,
    "softmax": _build_softmax,
    "layer_norm": _build_layer_norm,
    "batch_norm2d": _build_batch_norm2d,
    "dropout": _build_dropout,
    "maxpool2d": _build_maxpool2d,
    "conv2d": _build_conv2d,
    "cross_entropy": _build_cross_entropy,
}


def check_op(name: str, trials: int = 100, seed: int = 0) -> OpCheckResult:
    if name not in _BUILDERS:
        raise KeyError(f"no gradient-check builder for op {name!r}")
    op_index = DIFFERENTIABLE_OPS.index(name)
    worst = _check_builder(_BUILDERS[name], trials, seed, op_index)
    return OpCheckResult(op=name, trials=trials, max_rel_err=worst,
                         tolerance=OP_TOLERANCE)


def check_all_ops(trials: int = 100, seed: int = 0) -> list[OpCheckResult]:
    """Check every registered op; refuses to run if the registry and the
    builder table have drifted apart (coverage guarantee)."""
    missing = set(DIFFERENTIABLE_OPS) - set(_BUILDERS)
    extra = set(_BUILDERS) - set(DIFFERENTIABLE_OPS)
    if missing or extra:
        raise RuntimeError(
            f"op registry drift: missing builders {sorted(missing)}, "
            f"stale builders {sorted(extra)}")
    return [check_op(name, trials, seed) for name in DIFFERENTIABLE_OPS]


TINY_ARCH = ArchConfig(n_mels=8, input_frames=16, conv_channels=(2, 3, 4),
                       n_encoder_layers=1, n_heads=2, d_model=16, d_ff=32,
                       dropout_p=0.3, dtype="float64")


def check_full_model(seed: int = 0, samples_per_tensor: int = 4,
                     batch: int = 3) -> ModelCheckResult:
    """End-to-end check of the tiny classifier in training mode (batch-norm
    batch statistics and dropout active), sampling coordinates of every
    trainable tensor.

    Deviations are normalized by the largest gradient magnitude across the
    whole model rather than per tensor: some parameters (conv biases feeding
    batch norm) have identically zero gradient, where a per-tensor relative
    error would only amplify finite-difference noise.
    """
    rng = derived_rng(seed, 50)
    x = rng.normal(size=(batch, 1, TINY_ARCH.n_mels, TINY_ARCH.input_frames))
    labels = rng.integers(0, TINY_ARCH.n_classes, size=batch)
    base = init_params(TINY_ARCH, seed)

    def loss_value(params) -> float:
        streams = DropoutStreams(seed, STREAM_DROPOUT, 0, 0)
        logits = forward(x, params, TINY_ARCH, training=True,
                         dropout_streams=streams)
        return float(ad.cross_entropy(logits, labels).values)

    work = clone_params(base)
    streams = DropoutStreams(seed, STREAM_DROPOUT, 0, 0)
    logits = forward(x, work, TINY_ARCH, training=True, dropout_streams=streams)
    backward(ad.cross_entropy(logits, labels))

    deviations: list[tuple[float, str]] = []
    grad_scale, n_coords = 1e-8, 0
    pick = derived_rng(seed, 51)
    for name, tensor in work.items():
        if not tensor.requires_grad:
            continue
        count = min(samples_per_tensor, tensor.size)
        for flat in pick.choice(tensor.size, size=count, replace=False):
            idx = np.unravel_index(int(flat), tensor.shape)
            bumped = clone_params(base)
            bumped[name].values[idx] += FD_STEP
            up = loss_value(bumped)
            bumped = clone_params(base)
            bumped[name].values[idx] -= FD_STEP
            down = loss_value(bumped)
            numeric = (up - down) / (2.0 * FD_STEP)
            analytic = float(tensor.grad[idx])
            grad_scale = max(grad_scale, abs(numeric), abs(analytic))
            deviations.append((abs(numeric - analytic), name))
            n_coords += 1
    worst_dev, worst_tensor = max(deviations)
    return ModelCheckResult(max_rel_err=worst_dev / grad_scale,
                            tolerance=MODEL_TOLERANCE,
                            n_coordinates=n_coords, worst_tensor=worst_tensor)


def run_suite(trials: int = 100, seed: int = 0) -> GradCheckReport:
    start = time.monotonic()
    ops = tuple(check_all_ops(trials, seed))
    model = check_full_model(seed)
    return GradCheckReport(ops=ops, model=model,
                           elapsed_s=time.monotonic() - start)


def format_report(report: GradCheckReport) -> str:
    lines = [f"{'op':<16} {'trials':>6} {'max rel err':>12} {'tolerance':>10} result"]
    for r in report.ops:
        lines.append(f"{r.op:<16} {r.trials:>6} {r.max_rel_err:>12.3e} "
                     f"{r.tolerance:>10.0e} {'pass' if r.passed else 'FAIL'}")
    m = report.model
    lines.append(f"{'full model':<16} {m.n_coordinates:>6} {m.max_rel_err:>12.3e} "
                 f"{m.tolerance:>10.0e} {'pass' if m.passed else 'FAIL'}"
                 + ("" if m.passed else f"  (worst: {m.worst_tensor})"))
    lines.append(f"total time: {report.elapsed_s:.1f}s")
    return "\n".join(lines)
