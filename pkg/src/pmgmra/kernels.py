"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``PMGMRA_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("PMGMRA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

cover_tree_insert = _impl.cover_tree_insert
separation_violations = _impl.separation_violations

IMPLEMENTATIONS = {"python": _pykernels}
if BACKEND == "cython":
    IMPLEMENTATIONS["cython"] = _impl
