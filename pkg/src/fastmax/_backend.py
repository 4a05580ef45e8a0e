"""Kernel backend selection.

The compiled extension is used when importable; ``FASTMAX_BACKEND=python``
forces the NumPy fallback and ``FASTMAX_BACKEND=compiled`` makes a missing
extension an import error.
"""
import os

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_requested = os.environ.get("FASTMAX_BACKEND", "auto").lower()
if _requested == "compiled" and _compiled is None:
    raise ImportError("FASTMAX_BACKEND=compiled but fastmax._kernels is not built")
if _requested not in ("auto", "compiled", "python"):
    raise ImportError(f"unknown FASTMAX_BACKEND={_requested!r}")

_active = "python" if _requested == "python" or _compiled is None else "compiled"


def active_name():
    return _active


def kernels(name=None):
    return BACKENDS[name or _active]


def set_backend(name):
    """Switch the process-wide backend; returns the previous name."""
    global _active
    if name == "auto":
        name = "compiled" if _compiled is not None else "python"
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    prev, _active = _active, name
    return prev
