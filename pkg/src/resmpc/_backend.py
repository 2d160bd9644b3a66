"""Kernel backend selection.

The compiled ``_core`` extension is used when importable. Setting
``RESMPC_BACKEND=python`` forces the pure-Python kernels in ``_pycore``.
"""
import os
from contextlib import contextmanager

from . import _pycore

BACKEND = "python"
kernels = _pycore

if os.environ.get("RESMPC_BACKEND", "").lower() != "python":
    try:
        from . import _core
    except ImportError:  # extension not built
        pass
    else:
        kernels = _core
        BACKEND = "compiled"


def get_kernels(name=None):
    """Return a kernel module by name ("compiled" or "python"); default is active."""
    if name is None:
        return kernels
    if name == "python":
        return _pycore
    if name == "compiled":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")


_CONSUMERS = ("sparse_linalg", "qp", "robot", "mpc")


@contextmanager
def use_backend(name):
    """Temporarily route every kernel call through backend ``name``."""
    import importlib

    k = get_kernels(name)
    mods = [importlib.import_module(f"{__package__}.{m}") for m in _CONSUMERS]
    saved = [m.kernels for m in mods]
    for m in mods:
        m.kernels = k
    try:
        yield k
    finally:
        for m, s in zip(mods, saved):
            m.kernels = s
