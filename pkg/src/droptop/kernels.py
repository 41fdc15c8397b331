"""Backend selection for the hot conv kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels``. Set ``DROPTOP_PURE_PYTHON=1`` to force
the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
im2col = _pykernels.im2col
col2im = _pykernels.col2im

if not os.environ.get("DROPTOP_PURE_PYTHON"):
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _ckernels.im2col
        col2im = _ckernels.col2im

__all__ = ["BACKEND", "im2col", "col2im"]
