"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``DILOCO_KERNELS=python`` to force the fallback.
Both backends are bitwise interchangeable.
"""

import os

from . import _kernels_py

_py = _kernels_py
_compiled = None

if os.environ.get("DILOCO_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined,no-redef]
    except ImportError:
        _compiled = None

_active = _compiled if _compiled is not None else _py
BACKEND = "cython" if _compiled is not None else "python"


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.append("cython")
    return names


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active one)."""
    if name is None:
        return _active
    if name == "python":
        return _py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def adamw_update(*args):
    return _active.adamw_update(*args)


def nesterov_update(*args):
    return _active.nesterov_update(*args)


def f32_to_f16(x):
    return _active.f32_to_f16(x)


def f16_to_f32(h):
    return _active.f16_to_f32(h)
