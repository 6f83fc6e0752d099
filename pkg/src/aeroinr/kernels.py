"""Backend selection for the hot kernels.

The compiled extension is used when it imports; setting
``AEROINR_PURE_PYTHON=1`` forces the numpy fallback. Both backends expose
``field_forward``, ``closest_sqdist`` and ``winding_number``.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKENDS = {"python": _pykernels}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["compiled"] = _ckernels

if _ckernels is not None and os.environ.get("AEROINR_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]


def use_backend(name: str) -> None:
    """Switch backend at runtime (``"compiled"`` or ``"python"``)."""
    global _impl, BACKEND
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    BACKEND = name
    _impl = BACKENDS[name]


def field_forward(x, B, identity, Ws, bs, phi, W_out, b_out):
    return _impl.field_forward(x, B, identity, Ws, bs, phi, W_out, b_out)


def closest_sqdist(points, tris):
    return _impl.closest_sqdist(points, tris)


def winding_number(points, tris):
    return _impl.winding_number(points, tris)
