"""Kernel backend selection.

The conv2d hot path (im2col/col2im) has two interchangeable implementations:
a compiled Cython extension and a pure-numpy fallback. The compiled one is
preferred when importable; ``SDFYOLO_BACKEND=numpy|cython`` forces a choice.
Both produce bit-identical arrays, so the selection never affects results,
only speed (see benchmarks/bench_kernels.py).
"""
import os

from . import _kernels_np

try:
    from . import _kernels as _kernels_cy
except ImportError:
    _kernels_cy = None

_forced = os.environ.get("SDFYOLO_BACKEND", "").strip().lower()
if _forced == "numpy":
    _impl = _kernels_np
elif _forced == "cython":
    if _kernels_cy is None:
        raise ImportError("SDFYOLO_BACKEND=cython but the compiled extension "
                          "sdfyolo._kernels is not available")
    _impl = _kernels_cy
elif _forced:
    raise ValueError(f"unknown SDFYOLO_BACKEND {_forced!r}; use 'numpy' or 'cython'")
else:
    _impl = _kernels_cy if _kernels_cy is not None else _kernels_np

KERNEL_BACKEND = "cython" if _impl is _kernels_cy else "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
