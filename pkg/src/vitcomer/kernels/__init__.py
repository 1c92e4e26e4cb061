"""Hot kernels with two interchangeable backends.

``VITCOMER_KERNELS`` selects the backend at import: ``numba`` (default when
numba imports) or ``numpy``. :func:`use` switches at runtime.
"""
import os

import numpy as np

from . import _numpy

try:
    from . import _numba
except ImportError:  # numba missing or broken
    _numba = None

_BACKENDS = {"numpy": _numpy}
if _numba is not None:
    _BACKENDS["numba"] = _numba

_active = None


def available() -> list:
    return sorted(_BACKENDS)


def use(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available()}")
    _active = name


def backend() -> str:
    return _active


def _impl():
    return _BACKENDS[_active]


def conv2d_forward(x, w, stride, pad, groups):
    return _impl().conv2d_forward(np.ascontiguousarray(x), np.ascontiguousarray(w),
                                  stride, pad, groups)


def conv2d_backward(x, w, g, stride, pad, groups):
    return _impl().conv2d_backward(np.ascontiguousarray(x), np.ascontiguousarray(w),
                                   g, stride, pad, groups)


def deform_forward(value, shapes, starts, pix, attw):
    return _impl().deform_forward(np.ascontiguousarray(value), shapes, starts,
                                  np.ascontiguousarray(pix), np.ascontiguousarray(attw))


def deform_backward(value, shapes, starts, pix, attw, g):
    return _impl().deform_backward(np.ascontiguousarray(value), shapes, starts,
                                   np.ascontiguousarray(pix), np.ascontiguousarray(attw), g)


use(os.environ.get("VITCOMER_KERNELS", "numba" if _numba is not None else "numpy"))
