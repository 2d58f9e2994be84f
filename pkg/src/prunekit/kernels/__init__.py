"""Hot numeric kernels with two interchangeable backends.

``numba_ops`` is the compiled implementation, ``numpy_ops`` the pure-numpy
fallback. One of them is bound at import time (see ``prunekit.backend``)
and re-exported here; everything above this package calls the re-exports
and never notices which backend is active.

Determinism contract
--------------------
Within one backend every kernel is bitwise deterministic: a fixed
accumulation order per output element, no threading, no fastmath.

Across backends the accumulation orders are aligned so these results are
bitwise identical: conv2d_forward, dense_forward, dense_backward,
conv2d gw, maxpool forward/backward. Two conv2d_backward outputs use a
different (still fixed) order in the numpy fallback because numpy cannot
express the numba loop nest efficiently: gb (pairwise instead of
sequential sum) and gx (scatter ordered by kernel offset instead of by
patch). Those two agree across backends only to float64 rounding;
benchmarks and tests account for it.
"""

from ..backend import resolve_backend
from . import numpy_ops

ACTIVE_BACKEND = resolve_backend()

if ACTIVE_BACKEND == "numba":
    from . import numba_ops as _impl
else:
    _impl = numpy_ops

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
dense_forward = _impl.dense_forward
dense_backward = _impl.dense_backward
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward

__all__ = [
    "ACTIVE_BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "dense_forward",
    "dense_backward",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
]
