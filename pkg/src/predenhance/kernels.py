"""Backend selection for the numeric kernels.

The compiled extension is preferred. Set ``PREDENHANCE_PURE_PYTHON=1`` to force
the numpy fallback (the benchmark and the equivalence tests load both modules
directly instead of going through this selector).
"""

import os

from . import _pykernels

_ckernels = None
if os.environ.get("PREDENHANCE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:
        _ckernels = None

_impl = _ckernels if _ckernels is not None else _pykernels
BACKEND = "cython" if _ckernels is not None else "python"

bicubic_resize = _impl.bicubic_resize
gaussian_filter_valid = _impl.gaussian_filter_valid
iou_matrix = _impl.iou_matrix
greedy_match = _impl.greedy_match
pr_points = _impl.pr_points
average_precision_sorted = _impl.average_precision_sorted


def available_backends():
    out = {"python": _pykernels}
    if _ckernels is not None:
        out["cython"] = _ckernels
    else:
        try:
            from . import _ckernels as compiled
            out["cython"] = compiled
        except ImportError:
            pass
    return out
