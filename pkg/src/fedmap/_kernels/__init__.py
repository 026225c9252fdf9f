"""Backend selection for the hot kernels.

Set FEDMAP_BACKEND=numpy to force the pure-numpy path, FEDMAP_BACKEND=numba
to require the jitted path, or leave unset ("auto") to use numba when it
imports and fall back to numpy otherwise. The choice is made once at import
time; `benchmarks/bench_kernels.py` compares the two.
"""

import os

_CHOICE = os.environ.get("FEDMAP_BACKEND", "auto").lower()
if _CHOICE not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"FEDMAP_BACKEND must be 'auto', 'numba' or 'numpy', got {_CHOICE!r}"
    )

if _CHOICE == "numpy":
    from . import numpy_impl as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        if _CHOICE == "numba":
            raise
        from . import numpy_impl as _impl

        BACKEND = "numpy"

softplus = _impl.softplus
sigmoid = _impl.sigmoid
softmax_xent_fwd = _impl.softmax_xent_fwd
softmax_xent_bwd = _impl.softmax_xent_bwd
cox_nll = _impl.cox_nll
cindex_counts = _impl.cindex_counts
wilcoxon_exact_counts = _impl.wilcoxon_exact_counts

__all__ = [
    "BACKEND",
    "softplus",
    "sigmoid",
    "softmax_xent_fwd",
    "softmax_xent_bwd",
    "cox_nll",
    "cindex_counts",
    "wilcoxon_exact_counts",
]
