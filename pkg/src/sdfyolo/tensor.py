"""Reverse-mode autodiff over numpy arrays.

Covers exactly the operations the detector graph needs: conv2d, batchnorm,
SiLU/sigmoid, pooling, concat/split/reshape/matmul/softmax, elementwise
arithmetic, masked gather, and the loss primitives. Values are float32 by
default with float64 accumulation inside reductions (pool averages, batch
statistics, losses); float64 tensors are supported end to end so gradient
checks can run against 64-bit references.

Every op is deterministic: fixed reduction orders, no threading at this
level (BLAS matmuls partition deterministically), so identical inputs give
bit-identical outputs across runs.
"""
from __future__ import annotations

import os

import numpy as np

from . import backend
from .errors import ConfigError, NumericError

DEFAULT_DTYPE = np.float32

# Opt-in per-op finiteness guard; cheap enough for debugging, off for speed.
CHECK_FINITE = os.environ.get("SDFYOLO_CHECK_FINITE", "0") == "1"

# Test hook: scales silu's backward so a deliberately corrupted gradient can
# be injected (cli gradcheck --inject-fault).
_SILU_GRAD_SCALE = 1.0


class Tensor:
    """Dense N-d array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor through its graph."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo = _toposort(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        if CHECK_FINITE:
            for node in topo:
                if node.grad is not None and not np.all(np.isfinite(node.grad)):
                    raise NumericError("non-finite gradient produced during backward")

    # Operator sugar used by the block/loss code.
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


def _toposort(root):
    order, visited = [], set()
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
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _coerce(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    """Build a graph node; prunes the graph when no parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced in forward pass")
    return out


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (the adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = _coerce(a, DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)

    def backward(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = _coerce(a, DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)

    def backward(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = _coerce(a, DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), backward)


def div(a, b):
    a = _coerce(a, DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)

    def backward(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), backward)


def exp(x):
    y = np.exp(x.data)

    def backward(g):
        _acc(x, g * y)

    return _node(y, (x,), backward)


def log(x):
    def backward(g):
        _acc(x, g / x.data)

    return _node(np.log(x.data), (x,), backward)


def sqrt(x):
    y = np.sqrt(x.data)

    def backward(g):
        _acc(x, g / (2.0 * y))

    return _node(y, (x,), backward)


def atan(x):
    def backward(g):
        _acc(x, g / (1.0 + x.data * x.data))

    return _node(np.arctan(x.data), (x,), backward)


def sigmoid(x):
    y = _sigmoid_np(x.data)

    def backward(g):
        _acc(x, g * y * (1.0 - y))

    return _node(y, (x,), backward)


def silu(x):
    s = _sigmoid_np(x.data)

    def backward(g):
        _acc(x, _SILU_GRAD_SCALE * g * s * (1.0 + x.data * (1.0 - s)))

    return _node(x.data * s, (x,), backward)


def activation(x, kind):
    """Dispatch wrapper for the two activations the graph uses."""
    if kind == "silu":
        return silu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


def _sigmoid_np(z):
    # Stable in both tails: exp() only ever sees non-positive arguments.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def clamp(x, lo, hi):
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _acc(x, g * mask)

    return _node(np.clip(x.data, lo, hi), (x,), backward)


def maximum(a, b):
    a = _coerce(a, DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)
    amax = a.data >= b.data  # ties route to the first argument

    def backward(g):
        _acc(a, _unbroadcast(g * amax, a.data.shape))
        _acc(b, _unbroadcast(g * ~amax, b.data.shape))

    return _node(np.maximum(a.data, b.data), (a, b), backward)


def minimum(a, b):
    a = _coerce(a, DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)
    amin = a.data <= b.data

    def backward(g):
        _acc(a, _unbroadcast(g * amin, a.data.shape))
        _acc(b, _unbroadcast(g * ~amin, b.data.shape))

    return _node(np.minimum(a.data, b.data), (a, b), backward)


def bce_with_logits(z, target):
    """Elementwise binary cross-entropy on logits; `target` is a constant."""
    t = np.asarray(target, dtype=z.data.dtype)
    val = np.maximum(z.data, 0) - z.data * t + np.log1p(np.exp(-np.abs(z.data)))

    def backward(g):
        _acc(z, g * (_sigmoid_np(z.data) - t))

    return _node(val, (z,), backward)


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation)
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    data = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        _acc(x, np.broadcast_to(_restore_axes(g, x.data.shape, axis, keepdims), x.data.shape))

    return _node(data, (x,), backward)


def tmean(x, axis=None, keepdims=False):
    data = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in _norm_axes(axis, x.ndim)])

    def backward(g):
        gb = _restore_axes(g, x.data.shape, axis, keepdims) / x.dtype.type(n)
        _acc(x, np.broadcast_to(gb, x.data.shape))

    return _node(data, (x,), backward)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _restore_axes(g, shape, axis, keepdims):
    if axis is None or keepdims:
        return g.reshape([1] * len(shape)) if axis is None and not keepdims else g
    expanded = list(shape)
    for a in _norm_axes(axis, len(shape)):
        expanded[a] = 1
    return g.reshape(expanded)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x, shape):
    def backward(g):
        _acc(x, g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), backward)


def flatten_spatial(x):
    """(B,C,H,W) -> (B,C,H*W)."""
    b, c, h, w = x.data.shape
    return reshape(x, (b, c, h * w))


def transpose(x, axes):
    inv = np.argsort(axes)

    def backward(g):
        _acc(x, g.transpose(inv))

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def swap_last2(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def concat(tensors, axis):
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _acc(t, g[tuple(idx)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def concat_channels(tensors):
    return concat(tensors, axis=1)


def split(x, sizes, axis):
    """Split along `axis` into chunks of the given sizes (inverse of concat)."""
    if sum(sizes) != x.data.shape[axis]:
        raise ConfigError(f"split sizes {sizes} do not cover axis {axis} "
                          f"of extent {x.data.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + size)
        idx = tuple(idx)
        start += size

        def backward(g, idx=idx):
            buf = np.zeros_like(x.data)
            buf[idx] = g
            _acc(x, buf)

        outs.append(_node(np.ascontiguousarray(x.data[idx]), (x,), backward))
    return outs


def split_channels(x, sizes):
    return split(x, sizes, axis=1)


def gather_mask(x, mask):
    """Select elements of x where the boolean mask is true (flattened)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise ConfigError("mask shape must match tensor shape")

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[mask] = g
        _acc(x, buf)

    return _node(x.data[mask].copy(), (x,), backward)


def select_channel(x, c):
    """(B,K,H,W) -> (B,H,W), picking one channel of axis 1."""

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[:, c] = g
        _acc(x, buf)

    return _node(np.ascontiguousarray(x.data[:, c]), (x,), backward)


def upsample_nearest_2x(x):
    b, c, h, w = x.data.shape

    def backward(g):
        _acc(x, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _node(x.data.repeat(2, axis=2).repeat(2, axis=3), (x,), backward)


def matmul(a, b):
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _acc(a, _unbroadcast(ga, a.data.shape))
        _acc(b, _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward)


def softmax_lastdim(x):
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        _acc(x, y * (g - dot))

    return _node(y, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin/g,k,k) filters."""
    B, Cin, H, W = x.data.shape
    Cout, cpg, k, k2 = weight.data.shape
    if k != k2:
        raise ConfigError("only square kernels are supported")
    if Cin % groups or Cout % groups:
        raise ConfigError(f"channels ({Cin}->{Cout}) not divisible by groups={groups}")
    if cpg != Cin // groups:
        raise ConfigError(f"weight expects {cpg} channels/group, input provides {Cin // groups}")
    OH = (H + 2 * padding - k) // stride + 1
    OW = (W + 2 * padding - k) // stride + 1
    if OH < 1 or OW < 1:
        raise ConfigError(f"conv output would be empty for input {H}x{W}, k={k}, stride={stride}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    L = OH * OW
    cols = backend.im2col(xp, k, stride)              # (B, Cin*k*k, L)
    g_ = groups
    ckk = cpg * k * k
    co = Cout // g_
    w2 = weight.data.reshape(g_, co, ckk)
    colsg = cols.reshape(B, g_, ckk, L)
    out = np.matmul(w2, colsg)                        # (B, g, co, L)
    out = out.reshape(B, Cout, OH, OW)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        go = g.reshape(B, g_, co, L)
        if bias is not None:
            _acc(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            # one GEMM over the fused (B, L) axis per group
            got = np.ascontiguousarray(go.transpose(1, 2, 0, 3)).reshape(g_, co, B * L)
            ct = np.ascontiguousarray(colsg.transpose(1, 0, 3, 2)).reshape(g_, B * L, ckk)
            _acc(weight, np.matmul(got, ct).reshape(weight.data.shape))
        if x.requires_grad:
            w2t = np.ascontiguousarray(w2.transpose(0, 2, 1))  # (g, ckk, co)
            gcols = np.matmul(w2t, go).reshape(B, Cin * k * k, L)
            gxp = backend.col2im(np.ascontiguousarray(gcols), k, stride, Hp, Wp)
            if padding:
                gxp = gxp[:, :, padding:Hp - padding, padding:Wp - padding]
            _acc(x, gxp)

    return _node(out, parents, backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def max_pool_k5s1p2(x):
    """5x5 max pooling, stride 1, pad 2 (spatial size preserved)."""
    B, C, H, W = x.data.shape
    neg = np.array(-np.inf, dtype=x.dtype)
    xp = np.pad(x.data, ((0, 0), (0, 0), (2, 2), (2, 2)), constant_values=neg)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (5, 5), axis=(2, 3))
    flat = windows.reshape(B, C, H, W, 25)
    idx = flat.argmax(axis=-1)  # first max wins ties, matching the scan order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        buf = np.zeros((B, C, H + 4, W + 4), dtype=x.dtype)
        ii = np.arange(H)[:, None] + idx // 5
        jj = np.arange(W)[None, :] + idx % 5
        bb = np.arange(B)[:, None, None, None]
        cc = np.arange(C)[None, :, None, None]
        np.add.at(buf, (bb, cc, ii, jj), g)
        _acc(x, buf[:, :, 2:H + 2, 2:W + 2])

    return _node(np.ascontiguousarray(out), (x,), backward)


def avg_over_width(x):
    """(B,C,H,W) -> (B,C,H,1), the row descriptor used by coordinate attention."""
    return tmean(x, axis=3, keepdims=True)


def avg_over_height(x):
    """(B,C,H,W) -> (B,C,1,W)."""
    return tmean(x, axis=2, keepdims=True)


def pool(x, kind):
    if kind == "max_k5s1p2":
        return max_pool_k5s1p2(x)
    if kind == "avg_over_width":
        return avg_over_width(x)
    if kind == "avg_over_height":
        return avg_over_height(x)
    raise ConfigError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.03, eps=1e-3):
    """Per-channel normalization over (B,H,W); running stats updated in train mode.

    `running_mean`/`running_var` are plain arrays mutated in place in train
    mode (they are state, not graph nodes). Batch statistics accumulate in
    float64 before being cast back to the working dtype.
    """
    B, C, H, W = x.data.shape
    n = B * H * W
    if n == 0:
        raise ConfigError("batchnorm2d requires a non-empty batch")
    dt = x.dtype

    if training:
        mean64 = np.mean(x.data, axis=(0, 2, 3), dtype=np.float64)
        xm64 = x.data.astype(np.float64) - mean64.reshape(1, C, 1, 1)
        var64 = np.mean(xm64 * xm64, axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean64.astype(running_mean.dtype)
        unbiased = var64 * (n / (n - 1)) if n > 1 else var64
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased.astype(running_var.dtype)
        mean = mean64.astype(dt)
        var = var64.astype(dt)
    else:
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)

    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (x.data - mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    out = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        _acc(beta, np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(dt))
        _acc(gamma, np.sum(g * xhat, axis=(0, 2, 3), dtype=np.float64).astype(dt))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data.reshape(1, C, 1, 1)
        if training:
            m1 = np.mean(gxhat, axis=(0, 2, 3), dtype=np.float64).astype(dt)
            m2 = np.mean(gxhat * xhat, axis=(0, 2, 3), dtype=np.float64).astype(dt)
            gx = inv.reshape(1, C, 1, 1) * (gxhat - m1.reshape(1, C, 1, 1)
                                            - xhat * m2.reshape(1, C, 1, 1))
        else:
            gx = gxhat * inv.reshape(1, C, 1, 1)
        _acc(x, gx)

    return _node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# parameters and SGD
# ---------------------------------------------------------------------------

class Parameter:
    """Trainable tensor plus its SGD momentum buffer and tree path."""

    __slots__ = ("value", "momentum_buffer", "name")

    def __init__(self, data, name=""):
        self.value = Tensor(data, requires_grad=True)
        self.momentum_buffer = np.zeros_like(self.value.data)
        self.name = name

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.grad = None

    def astype(self, dtype):
        self.value.data = self.value.data.astype(dtype)
        self.momentum_buffer = self.momentum_buffer.astype(dtype)
        if self.value.grad is not None:
            self.value.grad = self.value.grad.astype(dtype)


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0):
    """Classic SGD with coupled weight decay:

        g' = g + wd * p;  buf = momentum * buf + g';  p -= lr * buf

    Gradients are cleared afterwards. Raises if any parameter is missing its
    gradient or a weight turns non-finite.
    """
    for p in params:
        if p.value.grad is None:
            raise NumericError(f"parameter {p.name or '<unnamed>'} has no gradient")
        g = p.value.grad
        if weight_decay:
            g = g + p.data.dtype.type(weight_decay) * p.data
        buf = p.momentum_buffer
        buf *= p.data.dtype.type(momentum)
        buf += g
        p.value.data -= p.data.dtype.type(lr) * buf
        if not np.all(np.isfinite(p.value.data)):
            raise NumericError(f"parameter {p.name or '<unnamed>'} became non-finite")
        p.zero_grad()
