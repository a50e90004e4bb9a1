"""Hot row-wise kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``NEURAL_RESERVE_BACKEND``
(``numba`` or ``numpy``; default ``numba`` when importable) and can be
switched at runtime with :func:`use_backend`. Matrix products are left to
numpy's BLAS in both backends.
"""

import logging
import os

from . import _numpy

logger = logging.getLogger(__name__)

KERNEL_NAMES = (
    "layer_norm_fwd",
    "layer_norm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "nll_rows",
    "head_grad_scores",
)

_BACKENDS = {"numpy": _numpy}
_active = {"name": "numpy", "module": _numpy}


def _load_numba():
    if "numba" not in _BACKENDS:
        from . import _numba

        _BACKENDS["numba"] = _numba
    return _BACKENDS["numba"]


def available_backends():
    names = ["numpy"]
    try:
        _load_numba()
        names.append("numba")
    except ImportError:
        pass
    return names


def use_backend(name):
    """Select the kernel backend (``"numba"`` or ``"numpy"``)."""
    if name == "numba":
        module = _load_numba()
    elif name == "numpy":
        module = _numpy
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    _active["name"] = name
    _active["module"] = module


def backend_name():
    return _active["name"]


def _dispatch(name):
    def call(*args):
        return getattr(_active["module"], name)(*args)

    call.__name__ = name
    return call


for _name in KERNEL_NAMES:
    globals()[_name] = _dispatch(_name)

_requested = os.environ.get("NEURAL_RESERVE_BACKEND", "numba").strip().lower()
try:
    use_backend(_requested)
except ImportError:
    logger.warning("numba unavailable, using numpy kernels")
    use_backend("numpy")
