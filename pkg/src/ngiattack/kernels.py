"""Backend selection for the hot loops of the tensor core.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. ``NGIATTACK_PURE_PYTHON=1`` forces the fallback.
Both backends produce bit-identical outputs.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("NGIATTACK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
gather = _impl.gather
scatter_add = _impl.scatter_add

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "gather",
    "scatter_add",
]
