"""Backend selection for the row kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation in ``_kernels_py`` is used.  Callers should go through this
module (``kernels.softmax_rows(...)``) so that :func:`use_backend` takes effect
everywhere.
"""

from __future__ import annotations

from types import ModuleType

from paint_lab import _kernels_py

try:
    from paint_lab import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_FUNCTIONS = (
    "softmax_rows",
    "entropy_rows",
    "logsumexp_rows",
    "interpolate_rows",
    "clipped_fkl_rows",
    "clipped_fkl_grad_rows",
)

BACKEND = ""


def available_backends() -> list[str]:
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def _module_for(name: str) -> ModuleType:
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; reinstall the package with Cython available")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def use_backend(name: str) -> None:
    """Switch every kernel function in this module to backend ``name``."""
    global BACKEND
    mod = _module_for(name)
    g = globals()
    for fn in _FUNCTIONS:
        g[fn] = getattr(mod, fn)
    BACKEND = name


def get_backend() -> str:
    return BACKEND


use_backend(available_backends()[0])
