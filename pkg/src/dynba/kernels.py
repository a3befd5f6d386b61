"""Backend selection for the hot kernels.

The compiled Cython module is used when importable; set
``DYNBA_PURE_PYTHON=1`` to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("DYNBA_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND
epipolar_scores = _impl.epipolar_scores
eliminate_sorted = _impl.eliminate_sorted
visual_linearize = _impl.visual_linearize
visual_accumulate = _impl.visual_accumulate


def available_backends():
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
