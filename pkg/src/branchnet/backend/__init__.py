"""Kernel backend selection.

The heavy inner loops (patch extraction, pooling, warping) exist twice:
as a Cython extension (``_kernels``) and as pure numpy (``pykernels``).
The compiled backend is preferred when importable; set
``BRANCHNET_BACKEND=python`` or ``=compiled`` to force one.

``python -m branchnet.benchmark`` times the two side by side.
"""

import os

from . import pykernels

try:
    from . import _kernels
except ImportError:
    _kernels = None

_BACKENDS = {"python": pykernels}
if _kernels is not None:
    _BACKENDS["compiled"] = _kernels


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name):
    """Return the backend module called *name* ('python' or 'compiled')."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; "
                         f"available: {available_backends()}")
    return _BACKENDS[name]


def _select():
    forced = os.environ.get("BRANCHNET_BACKEND")
    if forced:
        return get_backend(forced)
    return _BACKENDS.get("compiled", pykernels)


active = _select()
ACTIVE_NAME = active.NAME

im2col = active.im2col
col2im = active.col2im
maxpool2_forward = active.maxpool2_forward
maxpool2_backward = active.maxpool2_backward
bilinear_warp = active.bilinear_warp
