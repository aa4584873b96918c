"""Backend selection for the hot Grassmann kernels.

The compiled module is used when it imports; ``RGW_PURE_PYTHON=1`` forces
the fallback (the benchmark and the equivalence tests use both).
"""
import os

from . import _kernels_py

try:
    if os.environ.get("RGW_PURE_PYTHON"):
        raise ImportError("pure Python requested")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

merge_sign = _impl.merge_sign
merge_signs = _impl.merge_signs
product_terms = _impl.product_terms

__all__ = ["BACKEND", "merge_sign", "merge_signs", "product_terms"]
