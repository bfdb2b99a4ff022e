"""Finite-difference verification of reverse-mode gradients.

All checks run in float64: the forward is evaluated twice per probed
element with a central difference at the given eps, and compared against
the gradients the graph produced for a random-weighted sum of the output
(a plain sum would be blind to ops whose output sums to a constant, like
batch normalization).
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import BLOCK_KINDS, BlockSpec, build_block
from .errors import ConfigError
from .tensor import Tensor


def grad_check(fn, inputs, eps=1e-3, check=None, max_per_tensor=24, seed=0):
    """Max relative error between autodiff gradients and central differences.

    fn(*inputs) must return a Tensor. `inputs` are float64 Tensors; `check`
    lists the tensors whose gradients are probed (defaults to the inputs).
    Large tensors are spot-checked on a deterministic random subset of
    elements. Relative error uses max(1, |a|, |b|) in the denominator.
    """
    check = list(inputs) if check is None else list(check)
    for t in [*inputs, *check]:
        if t.dtype != np.float64:
            raise ConfigError("grad_check requires float64 tensors (64-bit reference)")

    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    weights = rng.standard_normal(out.shape)

    for t in check:
        t.grad = None
    out.backward(weights)
    analytic = [None if t.grad is None else t.grad.copy() for t in check]

    def scalar_eval():
        return float(np.sum(fn(*inputs).data * weights))

    max_err = 0.0
    for t, a in zip(check, analytic):
        if a is None:
            a = np.zeros_like(t.data)
        size = t.data.size
        if size <= max_per_tensor:
            idxs = np.arange(size)
        else:
            idxs = np.sort(rng.choice(size, size=max_per_tensor, replace=False))
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = scalar_eval()
            flat[i] = orig - eps
            f_minus = scalar_eval()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]), abs(fd))
            if err > max_err:
                max_err = err
    return max_err


# Small, fast shapes exercising every code path of each block kind.
_BLOCK_CASES = {
    "ConvBlock": (BlockSpec("ConvBlock", 3, 8, extra={"kernel": 3, "stride": 1}), (2, 3, 8, 8)),
    "C3k2": (BlockSpec("C3k2", 8, 8, repeat=2), (2, 8, 8, 8)),
    "SPPF": (BlockSpec("SPPF", 8, 8), (1, 8, 8, 8)),
    "C2PSA": (BlockSpec("C2PSA", 8, 8, extra={"heads": 4}), (1, 8, 6, 6)),
    "CoordAtt": (BlockSpec("CoordAtt", 16, 16, extra={"reduction": 16}), (1, 16, 6, 6)),
    "DetectHead": (BlockSpec("DetectHead", 8, 5), (1, 8, 8, 8)),
}


def check_block(kind, eps=1e-3, seed=0, max_per_tensor=16):
    """Gradient-check one block kind at its standard small shape."""
    spec, shape = _BLOCK_CASES[kind]
    rng = np.random.default_rng(seed)
    block = build_block(spec, rng=rng).astype(np.float64)
    x = Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)
    params = [p.value for p in block.parameters()]
    return grad_check(lambda t: block(t), [x], eps=eps,
                      check=[x, *params], max_per_tensor=max_per_tensor, seed=seed)


def check_all_blocks(eps=1e-3, seed=0):
    """Run every block kind; returns {kind: max relative error}."""
    return {kind: check_block(kind, eps=eps, seed=seed) for kind in BLOCK_KINDS}
