"""Hot loops behind the autodiff core, rasteriser and evaluator.

The compiled extension ``_ckernels`` is used when it was built; otherwise the
numpy fallback is imported. Set ``FACADESEG_PURE_PYTHON=1`` to force the
fallback. Both back ends produce bit-identical results.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("FACADESEG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def backends():
    """Return the kernel modules available in this install, by name."""
    found = {"python": _fallback}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found


def im2col(xp, kh, kw, h, w):
    return _impl.im2col(np.ascontiguousarray(xp), kh, kw, h, w)


def col2im(cols, hp, wp):
    return _impl.col2im(np.ascontiguousarray(cols), hp, wp)


def maxpool2x2(x):
    return _impl.maxpool2x2(np.ascontiguousarray(x))


def unpool2x2(vals, idx, h, w):
    return _impl.unpool2x2(np.ascontiguousarray(vals), np.ascontiguousarray(idx, dtype=np.int64), h, w)


def label_components(binary):
    return _impl.label_components(np.asarray(binary, dtype=bool))


def fill_polygon(xs, ys, h, w):
    return _impl.fill_polygon(xs, ys, h, w)
