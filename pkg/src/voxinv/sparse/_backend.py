"""Kernel backend selection.

The compiled Cython module is used when importable; otherwise, or when the
environment variable ``VOXINV_PURE_PYTHON`` is set to a non-empty value, the
numpy fallback is used. ``use_backend`` switches at runtime (tests and the
benchmark compare both).
"""
import os

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_state = {"impl": None, "threads": 1}


def _default():
    if _compiled is not None and not os.environ.get("VOXINV_PURE_PYTHON"):
        return _compiled
    return _fallback


_state["impl"] = _default()


def kernels():
    return _state["impl"]


def backend_name():
    return "cython" if _state["impl"] is _compiled else "numpy"


def available_backends():
    return ["numpy"] + (["cython"] if _compiled is not None else [])


def use_backend(name):
    """Select ``"cython"`` or ``"numpy"``; returns the previous name."""
    prev = backend_name()
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _state["impl"] = _compiled
    elif name == "numpy":
        _state["impl"] = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


def set_threads(n):
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _state["threads"] = int(n)


def threads():
    return _state["threads"]
