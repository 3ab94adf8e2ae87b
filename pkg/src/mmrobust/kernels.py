"""Backend selection for the row kernels.

The compiled module is used when it imports; set ``MMROBUST_KERNELS=python``
to force the numpy fallback (``=cython`` makes a missing build an error).
"""
from __future__ import annotations

import os

_choice = os.environ.get("MMROBUST_KERNELS", "auto").lower()

if _choice == "python":
    from . import _kernels_py as impl
else:
    try:
        from . import _ckernels as impl
    except ImportError:
        if _choice == "cython":
            raise
        from . import _kernels_py as impl

BACKEND: str = impl.BACKEND

masked_softmax_fwd = impl.masked_softmax_fwd
masked_softmax_bwd = impl.masked_softmax_bwd
layernorm_fwd = impl.layernorm_fwd
layernorm_bwd = impl.layernorm_bwd
gelu_fwd = impl.gelu_fwd
gelu_bwd = impl.gelu_bwd
