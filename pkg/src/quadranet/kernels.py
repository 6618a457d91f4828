"""Backend selection for the depthwise convolution hot loops.

The compiled extension ``quadranet._kernels`` is used when it imports;
otherwise the numpy fallback is used. Setting ``QUADRANET_PURE_PYTHON=1``
forces the fallback (the benchmark and the backend-agreement tests use
:func:`get_backend` to address both explicitly).
"""
import os
import types

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

if _compiled is not None and os.environ.get("QUADRANET_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "cython"
else:
    BACKEND = "python"


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name=None) -> types.ModuleType:
    name = BACKEND if name is None else name
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; "
                         f"available: {available_backends()}") from None


def dw_forward_multi(x, w, pad, backend=None):
    """Depthwise conv of ``x`` (N,C,H,W) with each bank of ``w`` (m,C,k,k)."""
    impl = get_backend(backend)
    return impl.dw_forward_multi(np.ascontiguousarray(x, dtype=np.float64),
                                 np.ascontiguousarray(w, dtype=np.float64), int(pad))


def dw_backward_multi(x, w, g, pad, backend=None):
    """Return (grad_x, grad_w) for :func:`dw_forward_multi` given upstream ``g``."""
    impl = get_backend(backend)
    return impl.dw_backward_multi(np.ascontiguousarray(x, dtype=np.float64),
                                  np.ascontiguousarray(w, dtype=np.float64),
                                  np.ascontiguousarray(g, dtype=np.float64), int(pad))
