"""Compositing kernel backends.

``_ckernels`` (Cython) is used when it has been built; otherwise the numpy
implementation in ``_pykernels`` is selected. Set ``SPLATPRUNE_BACKEND=python``
to force the fallback.
"""

from __future__ import annotations

import importlib
import os

from . import _pykernels

_NAMES = {"cython": "._ckernels", "python": "._pykernels"}


def available_backends() -> list[str]:
    names = ["python"]
    try:
        importlib.import_module("._ckernels", __name__)
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


def get_backend(name: str | None = None):
    """Return the kernel module called ``name`` (default: the active backend)."""
    if name is None:
        return active
    if name not in _NAMES:
        raise ValueError(f"unknown kernel backend {name!r}; choose from {sorted(_NAMES)}")
    return importlib.import_module(_NAMES[name], __name__)


def _select():
    requested = os.environ.get("SPLATPRUNE_BACKEND", "").strip().lower()
    if requested == "python":
        return _pykernels, "python"
    try:
        from . import _ckernels
    except ImportError:
        if requested == "cython":
            raise
        return _pykernels, "python"
    return _ckernels, "cython"


active, BACKEND = _select()
