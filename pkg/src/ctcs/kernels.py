"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy/pure-Python
fallback is used. Setting ``CTCS_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

if os.environ.get("CTCS_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND
label_components = _impl.label_components
find_splits = _impl.find_splits
tree_shap = _impl.tree_shap
neighbor_offsets = _pykernels.neighbor_offsets


def backends():
    """Map of every importable backend name to its module."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        return out
    out["cython"] = _ckernels
    return out
