"""Reverse-mode differentiable tensor operations, the Adam optimizer, and the
linear-warmup + cosine-annealing learning-rate schedule.

Values are numpy arrays (1-D/2-D/3-D, optionally batch-leading) of a single
dtype per graph: float64 for gradient checking, float32 for training.  The
computation record is rebuilt on every forward pass (define-by-run) and
backward() walks it once in reverse topological order with a fixed
accumulation order, so gradients are bit-reproducible.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np


class DiffError(ValueError):
    """Invalid shapes, geometry, or misuse of the differentiation record."""


_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager that disables recording (forward values only)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class DiffNode:
    """Value tensor plus gradient accumulator in a define-by-run record.

    Leaf nodes (no recorded inputs) receive accumulated gradients in
    ``grad``; interior nodes only relay them.  ``grad`` accumulates with +=
    across backward passes and is never overwritten.
    """

    __slots__ = ("value", "grad", "needs_grad", "_parents", "_vjp")

    def __init__(self, value, needs_grad=True):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.grad = None
        self.needs_grad = needs_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.value.shape


def constant(value, dtype=None) -> DiffNode:
    """Leaf node that neither stores nor requests a gradient."""
    arr = np.asarray(value, dtype=dtype)
    return DiffNode(arr, needs_grad=False)


def _make(value, parents, vjp) -> DiffNode:
    node = DiffNode(value)
    if _grad_enabled():
        node._parents = tuple(parents)
        node._vjp = vjp
    return node


def _topo_order(root: DiffNode):
    """Inputs-first postorder; iterate reversed for root-first traversal."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: DiffNode) -> None:
    """Accumulate dL/d(leaf) into every reachable leaf's grad field."""
    if root.value.size != 1:
        raise DiffError(f"backward root must be scalar, got shape {root.value.shape}")
    order = _topo_order(root)
    pass_grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = pass_grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.needs_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            acc = pass_grads.get(id(parent))
            if acc is None:
                # Copy: a vjp may hand the same buffer to several parents.
                pass_grads[id(parent)] = np.array(pg, copy=True)
            else:
                np.add(acc, pg, out=acc)


# ---------------------------------------------------------------------------
# Elementwise and reduction operations.

def add(a: DiffNode, b: DiffNode) -> DiffNode:
    return _make(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    return _make(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    return _make(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def div(a: DiffNode, b: DiffNode) -> DiffNode:
    return _make(a.value / b.value, (a, b),
                 lambda g: (g / b.value, -g * a.value / (b.value * b.value)))


def scale(x: DiffNode, c: float) -> DiffNode:
    return _make(x.value * c, (x,), lambda g: (g * c,))


def add_scalar(x: DiffNode, c: float) -> DiffNode:
    return _make(x.value + c, (x,), lambda g: (g,))


def log(x: DiffNode) -> DiffNode:
    return _make(np.log(x.value), (x,), lambda g: (g / x.value,))


def rowwise_scale(mat: DiffNode, vec: DiffNode) -> DiffNode:
    """Multiply the trailing axis of mat by a per-row scalar from vec."""
    if vec.value.shape != mat.value.shape[:-1]:
        raise DiffError(
            f"rowwise_scale shapes {mat.value.shape} vs {vec.value.shape}")
    v = vec.value[..., None]
    return _make(mat.value * v, (mat, vec),
                 lambda g: (g * v, (g * mat.value).sum(axis=-1)))


def sum_axis(x: DiffNode, axis: int = -1) -> DiffNode:
    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.value.shape),)
    return _make(x.value.sum(axis=axis), (x,), vjp)


def sum_all(x: DiffNode) -> DiffNode:
    return _make(np.asarray(x.value.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.value.shape),))


def mean_all(x: DiffNode) -> DiffNode:
    n = x.value.size
    return _make(np.asarray(x.value.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.value.shape),))


def sigmoid(x: DiffNode) -> DiffNode:
    v = x.value
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def prelu(x: DiffNode, slope: DiffNode) -> DiffNode:
    """x where x >= 0, slope * x otherwise; slope is a learnable scalar."""
    if slope.value.size != 1:
        raise DiffError(f"prelu slope must be scalar, got shape {slope.value.shape}")
    v = x.value
    neg = v < 0
    s = slope.value.reshape(())

    def vjp(g):
        gx = np.where(neg, g * s, g)
        gs = (g * np.where(neg, v, 0.0)).sum().reshape(slope.value.shape)
        return gx, gs

    return _make(np.where(neg, s * v, v), (x, slope), vjp)


def softmax_rows(w: DiffNode) -> DiffNode:
    """Softmax along the last axis, max-subtracted for stability."""
    v = w.value
    if not np.all(np.isfinite(v)):
        raise DiffError("softmax_rows input contains non-finite values")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, (w,),
                 lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    """Matrix product; supports 2-D operands and batch-leading 3-D operands."""
    av, bv = a.value, b.value

    def vjp(g):
        bt = np.swapaxes(bv, -1, -2)
        at = np.swapaxes(av, -1, -2)
        ga = np.matmul(g, bt)
        gb = np.matmul(at, g)
        if ga.ndim > av.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - av.ndim)))
        if gb.ndim > bv.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - bv.ndim)))
        return ga, gb

    return _make(np.matmul(av, bv), (a, b), vjp)


def transpose_last2(x: DiffNode) -> DiffNode:
    return _make(np.swapaxes(x.value, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def concat_channels(nodes) -> DiffNode:
    """Concatenate along the channel axis (second-to-last)."""
    nodes = list(nodes)
    sizes = [n.value.shape[-2] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=-2))

    return _make(np.concatenate([n.value for n in nodes], axis=-2), nodes, vjp)


def narrow_channels(x: DiffNode, start: int, length: int) -> DiffNode:
    """Slice [start, start+length) along the channel axis."""
    idx = (Ellipsis, slice(start, start + length), slice(None))

    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[idx] = g
        return (gx,)

    return _make(x.value[idx], (x,), vjp)


def narrow_frames(x: DiffNode, start: int, length: int) -> DiffNode:
    """Slice [start, start+length) along the frame (last) axis."""
    idx = (Ellipsis, slice(start, start + length))

    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[idx] = g
        return (gx,)

    return _make(x.value[idx], (x,), vjp)


# ---------------------------------------------------------------------------
# Convolution family.  Inputs are (channels, frames) or (batch, channels,
# frames); the result keeps the input's rank.

def _batched(v: np.ndarray):
    if v.ndim == 2:
        return v[None], False
    if v.ndim == 3:
        return v, True
    raise DiffError(f"expected 2-D or 3-D input, got shape {v.shape}")


def conv_output_length(length, kernel, stride=1, dilation=1, padding=0):
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _check_geometry(l_out, length, kernel, stride, dilation, padding):
    if l_out < 1:
        raise DiffError(
            f"convolution geometry collapses: L={length}, K={kernel}, "
            f"stride={stride}, dilation={dilation}, padding={padding} -> L'={l_out}")


def _gather_columns(xp: np.ndarray, kernel, stride, dilation, l_out):
    batch, channels = xp.shape[0], xp.shape[1]
    cols = np.empty((batch, channels, kernel, l_out), dtype=xp.dtype)
    span = (l_out - 1) * stride + 1
    for k in range(kernel):
        start = k * dilation
        cols[:, :, k, :] = xp[:, :, start:start + span:stride]
    return cols


def _scatter_columns(gcols: np.ndarray, padded_len, stride, dilation):
    batch, channels, kernel, l_out = gcols.shape
    gxp = np.zeros((batch, channels, padded_len), dtype=gcols.dtype)
    span = (l_out - 1) * stride + 1
    for k in range(kernel):
        start = k * dilation
        gxp[:, :, start:start + span:stride] += gcols[:, :, k, :]
    return gxp


def conv1d(x: DiffNode, weight: DiffNode, bias: DiffNode | None = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> DiffNode:
    """Cross-correlation convolution, weight (C_out, C_in, K)."""
    xv, batched = _batched(x.value)
    wv = weight.value
    c_out, c_in, kernel = wv.shape
    if xv.shape[1] != c_in:
        raise DiffError(f"conv1d channels {xv.shape[1]} vs weight C_in {c_in}")
    length = xv.shape[2]
    l_out = conv_output_length(length, kernel, stride, dilation, padding)
    _check_geometry(l_out, length, kernel, stride, dilation, padding)

    if kernel == 1 and stride == 1 and padding == 0:
        w2 = wv[:, :, 0]
        out = np.matmul(w2, xv)
        if bias is not None:
            out = out + bias.value[:, None]

        def vjp_pointwise(g):
            g3 = g if g.ndim == 3 else g[None]
            gw = np.matmul(g3, xv.transpose(0, 2, 1)).sum(axis=0)[:, :, None]
            gx = np.matmul(w2.T, g3)
            gb = g3.sum(axis=(0, 2)) if bias is not None else None
            if not batched:
                gx = gx[0]
            return (gx, gw) if bias is None else (gx, gw, gb)

        parents = (x, weight) if bias is None else (x, weight, bias)
        return _make(out if batched else out[0], parents, vjp_pointwise)

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding))) if padding else xv
    cols = _gather_columns(xp, kernel, stride, dilation, l_out)
    cols2 = cols.reshape(xv.shape[0], c_in * kernel, l_out)
    w2 = wv.reshape(c_out, c_in * kernel)
    out = np.matmul(w2, cols2)
    if bias is not None:
        out = out + bias.value[:, None]

    def vjp(g):
        g3 = g if g.ndim == 3 else g[None]
        gw = np.matmul(g3, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
        gcols = np.matmul(w2.T, g3).reshape(cols.shape)
        gxp = _scatter_columns(gcols, xp.shape[2], stride, dilation)
        gx = gxp[:, :, padding:xp.shape[2] - padding] if padding else gxp
        if not batched:
            gx = gx[0]
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out if batched else out[0], parents, vjp)


def depthwise_conv1d(x: DiffNode, weight: DiffNode, bias: DiffNode | None = None,
                     stride: int = 1, dilation: int = 1, padding: int = 0) -> DiffNode:
    """Per-channel (groups = C) convolution, weight (C, K)."""
    xv, batched = _batched(x.value)
    wv = weight.value
    channels, kernel = wv.shape
    if xv.shape[1] != channels:
        raise DiffError(f"depthwise channels {xv.shape[1]} vs weight {channels}")
    length = xv.shape[2]
    l_out = conv_output_length(length, kernel, stride, dilation, padding)
    _check_geometry(l_out, length, kernel, stride, dilation, padding)

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding))) if padding else xv
    span = (l_out - 1) * stride + 1
    out = np.zeros((xv.shape[0], channels, l_out), dtype=xv.dtype)
    for k in range(kernel):
        start = k * dilation
        out += wv[:, k][None, :, None] * xp[:, :, start:start + span:stride]
    if bias is not None:
        out = out + bias.value[:, None]

    def vjp(g):
        g3 = g if g.ndim == 3 else g[None]
        gw = np.empty_like(wv)
        gxp = np.zeros_like(xp)
        for k in range(kernel):
            start = k * dilation
            window = xp[:, :, start:start + span:stride]
            gw[:, k] = (g3 * window).sum(axis=(0, 2))
            gxp[:, :, start:start + span:stride] += wv[:, k][None, :, None] * g3
        gx = gxp[:, :, padding:xp.shape[2] - padding] if padding else gxp
        if not batched:
            gx = gx[0]
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out if batched else out[0], parents, vjp)


def depthwise_separable_conv1d(x: DiffNode, depth_weight: DiffNode, point_weight: DiffNode,
                               depth_bias: DiffNode | None = None,
                               point_bias: DiffNode | None = None,
                               stride: int = 1, dilation: int = 1,
                               padding: int = 0) -> DiffNode:
    """Depthwise convolution followed by a pointwise (1x1) convolution."""
    inner = depthwise_conv1d(x, depth_weight, depth_bias, stride, dilation, padding)
    return conv1d(inner, point_weight, point_bias)


def conv_transpose1d(x: DiffNode, weight: DiffNode, bias: DiffNode | None = None,
                     stride: int = 1, padding: int = 0) -> DiffNode:
    """Adjoint of conv1d, weight (C_in, C_out, K); upsamples by stride."""
    xv, batched = _batched(x.value)
    wv = weight.value
    c_in, c_out, kernel = wv.shape
    if xv.shape[1] != c_in:
        raise DiffError(f"conv_transpose1d channels {xv.shape[1]} vs weight C_in {c_in}")
    length = xv.shape[2]
    full = (length - 1) * stride + kernel
    l_out = full - 2 * padding
    if l_out < 1:
        raise DiffError(
            f"transposed convolution geometry collapses: L={length}, K={kernel}, "
            f"stride={stride}, padding={padding} -> L'={l_out}")

    # contrib[b, o, k, l] = sum_c x[b, c, l] * w[c, o, k]
    contrib = np.moveaxis(np.tensordot(xv, wv, axes=([1], [0])), 1, 3)
    yfull = np.zeros((xv.shape[0], c_out, full), dtype=xv.dtype)
    span = (length - 1) * stride + 1
    for k in range(kernel):
        yfull[:, :, k:k + span:stride] += contrib[:, :, k, :]
    out = yfull[:, :, padding:full - padding] if padding else yfull
    if bias is not None:
        out = out + bias.value[:, None]

    def vjp(g):
        g3 = g if g.ndim == 3 else g[None]
        if padding:
            gfull = np.zeros((g3.shape[0], c_out, full), dtype=g3.dtype)
            gfull[:, :, padding:full - padding] = g3
        else:
            gfull = g3
        gcols = np.empty((g3.shape[0], c_out, kernel, length), dtype=g3.dtype)
        for k in range(kernel):
            gcols[:, :, k, :] = gfull[:, :, k:k + span:stride]
        gx = np.tensordot(gcols, wv, axes=([1, 2], [1, 2])).transpose(0, 2, 1)
        gw = np.tensordot(xv, gcols, axes=([0, 2], [0, 3]))
        if not batched:
            gx = gx[0]
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out if batched else out[0], parents, vjp)


def group_norm(x: DiffNode, groups: int, gain: DiffNode, bias: DiffNode,
               eps: float = 1e-5) -> DiffNode:
    """Normalize to zero mean / unit variance over (channels-in-group x frames)."""
    xv, batched = _batched(x.value)
    b, c, length = xv.shape
    if c % groups:
        raise DiffError(f"channels {c} not divisible by {groups} groups")
    xg = xv.reshape(b, groups, (c // groups) * length)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    xhat_c = xhat.reshape(b, c, length)
    out = gain.value[:, None] * xhat_c + bias.value[:, None]

    def vjp(g):
        g3 = g if g.ndim == 3 else g[None]
        ghat = (g3 * gain.value[:, None]).reshape(b, groups, -1)
        gx = inv * (ghat
                    - ghat.mean(axis=-1, keepdims=True)
                    - xhat * (ghat * xhat).mean(axis=-1, keepdims=True))
        gx = gx.reshape(b, c, length)
        if not batched:
            gx = gx[0]
        ggain = (g3 * xhat_c).sum(axis=(0, 2))
        gbias = g3.sum(axis=(0, 2))
        return gx, ggain, gbias

    return _make(out if batched else out[0], (x, gain, bias), vjp)


def linear_interp_frames(x: DiffNode, new_len: int) -> DiffNode:
    """Per-channel linear interpolation of the frame axis to new_len.

    Endpoints map exactly; new_len equal to the input length is the identity.
    """
    if new_len < 1:
        raise DiffError(f"new_len must be positive, got {new_len}")
    xv = x.value
    old_len = xv.shape[-1]
    if old_len < 1:
        raise DiffError("cannot interpolate an empty frame axis")
    if new_len == old_len:
        return _make(xv.copy(), (x,), lambda g: (g,))
    if old_len == 1:
        def vjp_const(g):
            return (g.sum(axis=-1, keepdims=True),)
        return _make(np.repeat(xv, new_len, axis=-1), (x,), vjp_const)

    pos = np.arange(new_len) * ((old_len - 1) / (new_len - 1)) if new_len > 1 else np.zeros(1)
    idx = np.minimum(pos.astype(np.int64), old_len - 2)
    frac = (pos - idx).astype(xv.dtype)
    out = xv[..., idx] * (1.0 - frac) + xv[..., idx + 1] * frac

    def vjp(g):
        lead = g.shape[:-1]
        gf = g.reshape(-1, new_len)
        gx = np.zeros((gf.shape[0], old_len), dtype=g.dtype)
        rows = np.arange(gf.shape[0])[:, None]
        np.add.at(gx, (rows, idx[None, :]), gf * (1.0 - frac))
        np.add.at(gx, (rows, idx[None, :] + 1), gf * frac)
        return (gx.reshape(*lead, old_len),)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Parameters, Adam, and the learning-rate schedule.

class Parameter:
    """Named leaf tensor with Adam moment state."""

    def __init__(self, name: str, value):
        self.name = name
        self.node = DiffNode(np.array(value))
        self.m = np.zeros_like(self.node.value)
        self.v = np.zeros_like(self.node.value)
        self.step = 0

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def grad(self):
        return self.node.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.node.value.shape})"


def zero_grads(params) -> None:
    for p in params:
        p.node.grad = None


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.node.grad is not None:
            total += float(np.sum(np.square(p.node.grad, dtype=np.float64)))
    return math.sqrt(total)


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; a zero gradient leaves values alone."""
    for p in params:
        g = p.node.grad
        if g is None:
            g = np.zeros_like(p.node.value)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.node.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.node.value.dtype)


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warmup to max_lr, then cosine decay to zero."""

    max_lr: float
    warmup_ratio: float
    total_steps: int

    def __post_init__(self):
        if self.max_lr <= 0:
            raise DiffError(f"max_lr must be positive, got {self.max_lr}")
        if not 0 < self.warmup_ratio < 1:
            raise DiffError(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if self.total_steps < 1:
            raise DiffError(f"total_steps must be positive, got {self.total_steps}")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate at a step in [0, total_steps]."""
    if not 0 <= step <= cfg.total_steps:
        raise DiffError(f"step {step} outside [0, {cfg.total_steps}]")
    warmup_steps = int(round(cfg.warmup_ratio * cfg.total_steps))
    if warmup_steps > 0 and step <= warmup_steps:
        return cfg.max_lr * step / warmup_steps
    decay_steps = cfg.total_steps - warmup_steps
    if decay_steps <= 0:
        return 0.0
    progress = (step - warmup_steps) / decay_steps
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def finite_difference_check(params, build_loss, step: float = 1e-5):
    """Per-parameter max relative error of backward vs central differences.

    build_loss() must rebuild the forward graph from the current parameter
    values and return the scalar loss node.  The relative error of one entry
    is |fd - bw| / max(1, |fd|, |bw|).
    """
    zero_grads(params)
    root = build_loss()
    backward(root)
    analytic = {
        p.name: (p.node.grad.copy() if p.node.grad is not None
                 else np.zeros_like(p.node.value))
        for p in params
    }
    errors = {}
    with no_grad():
        for p in params:
            flat = p.node.value.reshape(-1)
            bw = analytic[p.name].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                kept = flat[i]
                flat[i] = kept + step
                f_plus = float(build_loss().value)
                flat[i] = kept - step
                f_minus = float(build_loss().value)
                flat[i] = kept
                fd = (f_plus - f_minus) / (2.0 * step)
                err = abs(fd - bw[i]) / max(1.0, abs(fd), abs(bw[i]))
                if err > worst:
                    worst = err
            errors[p.name] = worst
    return errors
