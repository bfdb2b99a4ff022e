"""Building blocks of the detector: Conv unit, C3k2, SPPF, position-wise
self-attention (C2PSA), coordinate attention, and the detection head.

Blocks are pure functions of (input, parameters, mode): safe to share
read-only for inference, exclusively owned while training updates run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Parameter, Tensor


class Module:
    """Minimal parameter-tree container (attribute walk, insertion order)."""

    training: bool = True
    _buffer_names: tuple = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _child_modules(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._child_modules():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self):
        for mprefix, mod in self.named_modules():
            for name, val in vars(mod).items():
                if isinstance(val, Parameter):
                    yield (f"{mprefix}.{name}" if mprefix else name), val

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for mprefix, mod in self.named_modules():
            for bname in mod._buffer_names:
                yield (f"{mprefix}.{bname}" if mprefix else bname), mod, bname

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def train(self, mode=True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.astype(dtype)
        for _, mod, bname in self.named_buffers():
            setattr(mod, bname, getattr(mod, bname).astype(dtype))
        return self

    def assign_names(self):
        """Stamp each parameter with its path in the module tree."""
        for name, p in self.named_parameters():
            p.name = name
        return self


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    """Bare convolution (optionally biased), no normalization or activation."""

    def __init__(self, cin, cout, k=1, stride=1, padding=None, groups=1,
                 bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        if padding is None:
            padding = k // 2
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (cin // groups) * k * k
        self.weight = Parameter(_uniform_init(rng, (cout, cin // groups, k, k), fan_in))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight.value,
                        None if self.bias is None else self.bias.value,
                        stride=self.stride, padding=self.padding, groups=self.groups)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c, momentum=0.03, eps=1e-3):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(c, dtype=np.float32))
        self.beta = Parameter(np.zeros(c, dtype=np.float32))
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def forward(self, x):
        return T.batchnorm2d(x, self.gamma.value, self.beta.value,
                             self.running_mean, self.running_var,
                             training=self.training,
                             momentum=self.momentum, eps=self.eps)


class ConvBlock(Module):
    """Conv -> BatchNorm -> SiLU, the unit every stage is made of."""

    def __init__(self, cin, cout, k=1, stride=1, padding=None, groups=1,
                 act=True, rng=None):
        self.conv = Conv2d(cin, cout, k, stride, padding, groups, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return T.silu(y) if self.act else y


class Bottleneck(Module):
    """Two 3x3 conv blocks with a residual shortcut."""

    def __init__(self, c, rng=None):
        self.cv1 = ConvBlock(c, c, 3, rng=rng)
        self.cv2 = ConvBlock(c, c, 3, rng=rng)

    def forward(self, x):
        return T.add(x, self.cv2(self.cv1(x)))


class C3k2(Module):
    """Split-transform-merge stage: 1x1 in, one pass-through path and one
    stack of residual 3x3 bottlenecks, channel concat, 1x1 out."""

    def __init__(self, cin, cout, repeat=1, rng=None):
        hidden = max(2, cout // 2)
        self.hidden = hidden
        self.cv1 = ConvBlock(cin, 2 * hidden, 1, rng=rng)
        self.bottlenecks = [Bottleneck(hidden, rng=rng) for _ in range(repeat)]
        self.cv2 = ConvBlock(2 * hidden, cout, 1, rng=rng)

    def forward(self, x):
        a, b = T.split_channels(self.cv1(x), [self.hidden, self.hidden])
        for m in self.bottlenecks:
            b = m(b)
        return self.cv2(T.concat_channels([a, b]))


class SPPF(Module):
    """Spatial pyramid pooling (fast): three chained 5x5 max pools, concat."""

    def __init__(self, cin, cout, rng=None):
        hidden = max(2, cin // 2)
        self.cv1 = ConvBlock(cin, hidden, 1, rng=rng)
        self.cv2 = ConvBlock(4 * hidden, cout, 1, rng=rng)

    def forward(self, x):
        y0 = self.cv1(x)
        y1 = T.max_pool_k5s1p2(y0)
        y2 = T.max_pool_k5s1p2(y1)
        y3 = T.max_pool_k5s1p2(y2)
        return self.cv2(T.concat_channels([y0, y1, y2, y3]))


class C2PSA(Module):
    """Position-wise self-attention over the H*W grid with a 1x1-conv FFN;
    both sublayers residual, shape preserved."""

    def __init__(self, c, heads=4, rng=None):
        if c % heads:
            raise ConfigError(f"C2PSA channels {c} not divisible by heads {heads}")
        self.heads = heads
        self.q = Conv2d(c, c, 1, rng=rng)
        self.k = Conv2d(c, c, 1, rng=rng)
        self.v = Conv2d(c, c, 1, rng=rng)
        self.proj = Conv2d(c, c, 1, rng=rng)
        self.ffn1 = ConvBlock(c, 2 * c, 1, rng=rng)
        self.ffn2 = Conv2d(2 * c, c, 1, rng=rng)

    def attention(self, x):
        """Pre-residual attention output (exposed for equivariance tests)."""
        b, c, h, w = x.shape
        dh = c // self.heads
        scale = 1.0 / math.sqrt(dh)

        def heads_view(t):
            return T.reshape(t, (b, self.heads, dh, h * w))

        q = heads_view(self.q(x))
        k = heads_view(self.k(x))
        v = heads_view(self.v(x))
        scores = T.mul(T.matmul(T.swap_last2(q), k), scale)   # (b, heads, L, L)
        attn = T.softmax_lastdim(scores)
        ctx = T.matmul(v, T.swap_last2(attn))                 # (b, heads, dh, L)
        return self.proj(T.reshape(ctx, (b, c, h, w)))

    def forward(self, x):
        x = T.add(x, self.attention(x))
        return T.add(x, self.ffn2(self.ffn1(x)))


class CoordAtt(Module):
    """Coordinate attention: width- and height-pooled descriptors produce
    per-row and per-column sigmoid gates that re-weight the input."""

    def __init__(self, c, reduction=16, rng=None):
        if reduction < 1 or reduction > c:
            raise ConfigError(f"reduction {reduction} out of range for {c} channels")
        mid = max(8, c // reduction)
        self.squeeze = ConvBlock(c, mid, 1, rng=rng)
        self.conv_h = Conv2d(mid, c, 1, rng=rng)
        self.conv_w = Conv2d(mid, c, 1, rng=rng)

    def gates(self, x):
        """Row gate (B,C,H,1) and column gate (B,C,1,W)."""
        b, c, h, w = x.shape
        zh = T.avg_over_width(x)                    # (B,C,H,1)
        zw = T.swap_last2(T.avg_over_height(x))     # (B,C,W,1)
        y = self.squeeze(T.concat([zh, zw], axis=2))
        yh, yw = T.split(y, [h, w], axis=2)
        gh = T.sigmoid(self.conv_h(yh))
        gw = T.sigmoid(T.swap_last2(self.conv_w(yw)))
        return gh, gw

    def forward(self, x):
        gh, gw = self.gates(x)
        return T.mul(T.mul(x, gh), gw)


class DetectHead(Module):
    """Two stacked conv units and a 1x1 projection to 5 raw channels
    (tx, ty, tw, th, objectness logit).

    Unit 1 is depthwise-separable; unit 2 swaps the depthwise 3x3 for a
    full 3x3 convolution to mix channels. The projection bias starts at the
    box-size prior and a low-objectness prior so early training emits few
    detections.
    """

    def __init__(self, c, rng=None, stride=16, prior_size_px=50.0, obj_bias=-4.0):
        self.dw = ConvBlock(c, c, 3, groups=c, rng=rng)
        self.pw1 = ConvBlock(c, c, 1, rng=rng)
        self.full = ConvBlock(c, c, 3, rng=rng)
        self.pw2 = ConvBlock(c, c, 1, rng=rng)
        self.pred = Conv2d(c, 5, 1, rng=rng)
        size_logit = math.log(prior_size_px / stride)
        self.pred.bias.value.data[:] = np.array(
            [0.0, 0.0, size_logit, size_logit, obj_bias], dtype=np.float32)

    def forward(self, x):
        y = self.pw1(self.dw(x))
        y = self.pw2(self.full(y))
        return self.pred(y)


@dataclass
class BlockSpec:
    """Declarative block description (used by the gradcheck harness)."""
    kind: str
    in_channels: int
    out_channels: int
    repeat: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ConfigError("channel counts must be positive")


BLOCK_KINDS = ("ConvBlock", "C3k2", "SPPF", "C2PSA", "CoordAtt", "DetectHead")


def build_block(spec: BlockSpec, rng=None) -> Module:
    kind = spec.kind
    if kind == "ConvBlock":
        return ConvBlock(spec.in_channels, spec.out_channels,
                         k=spec.extra.get("kernel", 3),
                         stride=spec.extra.get("stride", 1), rng=rng)
    if kind == "C3k2":
        return C3k2(spec.in_channels, spec.out_channels, repeat=spec.repeat, rng=rng)
    if kind == "SPPF":
        return SPPF(spec.in_channels, spec.out_channels, rng=rng)
    if kind == "C2PSA":
        if spec.in_channels != spec.out_channels:
            raise ConfigError("C2PSA preserves channel count")
        return C2PSA(spec.in_channels, heads=spec.extra.get("heads", 4), rng=rng)
    if kind == "CoordAtt":
        if spec.in_channels != spec.out_channels:
            raise ConfigError("CoordAtt preserves channel count")
        return CoordAtt(spec.in_channels, reduction=spec.extra.get("reduction", 16), rng=rng)
    if kind == "DetectHead":
        return DetectHead(spec.in_channels, rng=rng,
                          stride=spec.extra.get("stride", 16))
    raise ConfigError(f"unknown block kind {kind!r}")
