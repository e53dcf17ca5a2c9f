"""A small reverse-mode autodiff engine over dense NCHW numpy arrays.

Only the operators the segmentation networks need are provided. Every op
checks its output for NaN/Inf and raises :class:`NonFiniteError` on poison.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import kernels

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces or receives NaN/Inf values."""


class ShapeError(ValueError):
    pass


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference and finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """Array plus the bookkeeping needed for reverse-mode differentiation."""

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def backward(self, grad=None):
        """Back-propagate from this tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        _accumulate(self, np.asarray(grad, dtype=self.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not isinstance(node, Parameter):
                    # intermediate grads are not needed once propagated
                    node.grad = None

    def __add__(self, other):
        return add(self, other)


class Parameter(Tensor):
    """A trainable tensor. Layers that share weights hold the same object."""

    def __init__(self, data, name="", share_id=None):
        super().__init__(np.asarray(data), requires_grad=True, op="param")
        self.name = name
        self.share_id = share_id

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, share_id={self.share_id!r})"


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _make(data, parents, backward, op):
    data = _finite(data, op)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward, op=op)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward, "add")


def total(x):
    """Sum of all entries, as a 0-d tensor."""
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def cat(tensors, axis=1):
    """Concatenate along ``axis`` in argument order."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("cat: empty tensor list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise ShapeError("cat: rank mismatch")
        other = [d for i, d in enumerate(t.shape) if i != axis % len(ref)]
        mine = [d for i, d in enumerate(ref) if i != axis % len(ref)]
        if other != mine:
            raise ShapeError(f"cat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "cat")


def concat_channels(tensors):
    return cat(tensors, axis=1)


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        _accumulate(x, np.where(pos, g, g * x.dtype.type(slope)))

    return _make(out, (x,), backward, "leaky_relu")


def relu(x):
    return leaky_relu(x, 0.0)


def softmax_channels(x, groups=1):
    """Softmax over channels, independently within ``groups`` equal channel blocks."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"softmax_channels: {c} channels not divisible into {groups} groups")
    z = x.data.reshape(n, groups, c // groups, h, w)
    e = np.exp(z - z.max(axis=2, keepdims=True))
    s = e / e.sum(axis=2, keepdims=True)

    def backward(g):
        g = g.reshape(s.shape)
        dz = s * (g - (g * s).sum(axis=2, keepdims=True))
        _accumulate(x, dz.reshape(x.shape))

    return _make(s.reshape(x.shape), (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, groups=1):
    """Same-padded stride-1 cross-correlation with zero padding.

    ``weight`` has shape (out, in // groups, kh, kw) with odd kernel sizes.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c != cg * groups or o % groups:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape} (groups={groups})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} must be odd for same padding")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = kernels.im2col(xp, kh, kw, h, w)
    k = cg * kh * kw
    cols_g = cols.reshape(n, groups, k, h * w)
    w_g = weight.data.reshape(groups, o // groups, k)
    out = np.matmul(w_g[None], cols_g).reshape(n, o, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_g = g.reshape(n, groups, o // groups, h * w)
        if weight.requires_grad:
            dw = np.matmul(g_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
            _accumulate(weight, dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w_g.transpose(0, 2, 1)[None], g_g)
            dxp = kernels.col2im(dcols.reshape(n, c, kh, kw, h, w), h + 2 * ph, w + 2 * pw)
            _accumulate(x, dxp[:, :, ph:ph + h, pw:pw + w])

    return _make(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolIndices:
    """Argmax record from :func:`maxpool2x2_with_indices`.

    ``in_size`` is the spatial size before pooling, ``padded_size`` after the
    right/bottom replication pad applied to odd sizes.
    """

    idx: np.ndarray
    in_size: tuple
    padded_size: tuple


def maxpool2x2_with_indices(x):
    x = as_tensor(x)
    n, c, h, w = x.shape
    hp, wp = h + h % 2, w + w % 2
    data = x.data
    if (hp, wp) != (h, w):
        data = np.pad(data, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)), mode="edge")
    pooled, idx = kernels.maxpool2x2(data)
    rec = PoolIndices(idx, (h, w), (hp, wp))

    def backward(g):
        gp = kernels.unpool2x2(g, idx, hp, wp)
        _accumulate(x, _fold_pad(gp, h, w))

    return _make(pooled, (x,), backward, "maxpool2x2"), rec


def _fold_pad(gp, h, w):
    """Route gradient of replicated pad cells back to the cells they copied."""
    hp, wp = gp.shape[2:]
    if wp != w:
        gp = gp.copy()
        gp[:, :, :, w - 1] += gp[:, :, :, w]
        gp = gp[:, :, :, :w]
    if hp != h:
        gp = gp.copy()
        gp[:, :, h - 1, :] += gp[:, :, h, :]
        gp = gp[:, :, :h, :]
    return np.ascontiguousarray(gp)


def max_unpool2x2(x, indices, out_size=None):
    """Scatter ``x`` to the argmax positions recorded in ``indices``."""
    x = as_tensor(x)
    if out_size is not None and tuple(out_size) != tuple(indices.in_size):
        raise ShapeError(f"max_unpool2x2: out_size {tuple(out_size)} does not match recorded {indices.in_size}")
    if x.shape != indices.idx.shape:
        raise ShapeError(f"max_unpool2x2: stale indices {indices.idx.shape} for input {x.shape}")
    h, w = indices.in_size
    hp, wp = indices.padded_size
    n, c = x.shape[:2]
    idx = indices.idx
    out = kernels.unpool2x2(x.data, idx, hp, wp)[:, :, :h, :w]

    def backward(g):
        gp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        gp[:, :, :h, :w] = g
        flat = gp.reshape(n, c, hp * wp)
        _accumulate(x, np.take_along_axis(flat, idx.reshape(n, c, -1), axis=-1).reshape(x.shape))

    return _make(np.ascontiguousarray(out), (x,), backward, "max_unpool2x2")


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels, dtype=None, momentum=0.1, eps=1e-5):
        dtype = dtype or _DEFAULT_DTYPE
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def astype(self, dtype):
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)


def batchnorm2d(x, gamma, beta, state, training):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta {gamma.shape}/{beta.shape} for {c} channels")
    eps = x.dtype.type(state.eps)
    if training:
        m = n * h * w
        if m == 1:
            raise ShapeError("batchnorm2d: training mode needs more than one value per channel")
        with np.errstate(over="ignore"):
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
        # an overflowed variance would quietly normalise everything to zero
        _finite(var, "batchnorm2d statistics")
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var * (m / (m - 1))).astype(
            state.running_var.dtype
        )
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                m = n * h * w
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv[None, :, None, None]
            _accumulate(x, dx)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

PROB_FLOOR = 1e-12


def weighted_cross_entropy(probs, target, weights):
    """Per-group weighted cross-entropy on softmax outputs.

    ``probs`` is (N, G*K, H, W) holding G independent K-way distributions,
    ``target`` is (N, G, H, W) (or (N, H, W) when G == 1) of label indices,
    negative entries meaning "ignore"; ``weights`` has length K. Each group's loss is
    ``sum_p w[t_p] * -log(p[t_p]) / sum_p w[t_p]``; zero-weight pixels add
    nothing to either sum. Returns a tensor of shape (G,).
    """
    probs = as_tensor(probs)
    weights = np.asarray(weights, dtype=np.float64)
    k = len(weights)
    n, ch, h, w = probs.shape
    if ch % k:
        raise ShapeError(f"weighted_cross_entropy: {ch} channels not a multiple of {k} labels")
    groups = ch // k
    target = np.asarray(target)
    if target.ndim == 3:
        target = target[:, None]
    if target.shape != (n, groups, h, w):
        raise ShapeError(f"weighted_cross_entropy: target {target.shape} vs probs {probs.shape}")
    if target.max(initial=0) >= k:
        raise ValueError(f"weighted_cross_entropy: target labels outside 0..{k - 1}")
    p = probs.data.reshape(n, groups, k, h, w)
    valid = target >= 0
    tgt = np.where(valid, target, 0).astype(np.int64)
    pt = np.take_along_axis(p, tgt[:, :, None], axis=2)[:, :, 0].astype(np.float64)
    wt = np.where(valid, weights[tgt], 0.0)
    norm = wt.sum(axis=(0, 2, 3))
    clamped = np.maximum(pt, PROB_FLOOR)
    num = (wt * -np.log(clamped)).sum(axis=(0, 2, 3))
    safe = np.where(norm > 0, norm, 1.0)
    loss = np.where(norm > 0, num / safe, 0.0)

    def backward(g):
        g = np.asarray(g, dtype=np.float64).reshape(groups)
        coef = np.where(norm > 0, g / safe, 0.0)
        dpt = -coef[None, :, None, None] * wt / clamped
        dpt = np.where(pt > PROB_FLOOR, dpt, 0.0)
        dp = np.zeros(p.shape, dtype=probs.dtype)
        np.put_along_axis(dp, tgt[:, :, None], dpt[:, :, None].astype(probs.dtype), axis=2)
        _accumulate(probs, dp.reshape(probs.shape))

    return _make(loss.astype(probs.dtype), (probs,), backward, "weighted_cross_entropy")
