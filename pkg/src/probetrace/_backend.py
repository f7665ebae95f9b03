"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``PROBETRACE_BACKEND=python`` is set, the numpy twin
is used.  Both expose ``tridiag_apply`` and ``bicgstab``.
"""
import importlib
import os

from . import _kernels_py


def load_backend(name=None):
    """Return the kernel module for ``name`` ("compiled" or "python")."""
    if name is None:
        name = os.environ.get("PROBETRACE_BACKEND", "compiled").lower()
    if name == "python":
        return _kernels_py
    if name != "compiled":
        raise ValueError(f"unknown backend {name!r}")
    try:
        return importlib.import_module("probetrace._kernels")
    except ImportError:
        return _kernels_py


kernels = load_backend()
BACKEND = "python" if kernels is _kernels_py else "compiled"


def compiled_available():
    try:
        importlib.import_module("probetrace._kernels")
    except ImportError:
        return False
    return True
