"""Branch kernel dispatch: compiled extension if importable, numpy otherwise.

Set ``ACDISPATCH_PURE_PYTHON=1`` to force the numpy path.
"""
import os

from . import _kernels_py

if os.environ.get("ACDISPATCH_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

IMPLEMENTATION = _impl.IMPLEMENTATION
flows = _impl.flows
flow_grads = _impl.flow_grads
weighted_hessian = _impl.weighted_hessian
