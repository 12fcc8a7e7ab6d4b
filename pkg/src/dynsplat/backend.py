"""Kernel backend selection: compiled Cython when built, numpy otherwise.

Override with the DYNSPLAT_BACKEND environment variable ("python"/"cython")
or per call through RenderOptions.backend.
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _kernels_cy
except ImportError:           # extension not built: pure-Python fallback
    _kernels_cy = None


def available_backends() -> list[str]:
    names = ["python"]
    if _kernels_cy is not None:
        names.insert(0, "cython")
    return names


def get_kernels(name: str = "auto"):
    if name == "auto":
        name = os.environ.get("DYNSPLAT_BACKEND", "auto")
    if name == "auto":
        return _kernels_cy if _kernels_cy is not None else _kernels_py
    if name == "cython":
        if _kernels_cy is None:
            raise RuntimeError("compiled kernels not available; "
                               "build the extension or use backend='python'")
        return _kernels_cy
    if name == "python":
        return _kernels_py
    raise ValueError(f"unknown backend {name!r}")


def default_backend_name() -> str:
    return get_kernels("auto").BACKEND_NAME
