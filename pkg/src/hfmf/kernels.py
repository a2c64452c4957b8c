"""Backend selection for the convolution kernels.

The compiled extension is used when it imports; set ``HFMF_PURE_PYTHON=1`` to
force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("HFMF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols: np.ndarray, C: int, H: int, W: int, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), C, H, W, kh, kw, stride, pad)
