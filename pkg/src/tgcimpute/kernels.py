"""Kernel backend selection.

The EM row loops ship in two interchangeable implementations: a compiled
Cython core (built at install time) and a pure numpy/scipy fallback.  The
compiled core is preferred when present; ``TGCIMPUTE_BACKEND`` or an explicit
name overrides the choice.  Both expose the same functions and the same
row-order reduction semantics; ``benchmarks/bench_kernels.py`` compares their
throughput.
"""

from __future__ import annotations

import os

from . import _pykernels
from .errors import ConfigError

_BACKENDS = {"python": _pykernels}

try:
    from . import _ckernels

    _BACKENDS["compiled"] = _ckernels
except ImportError:  # pure-Python install
    _ckernels = None

__all__ = ["available_backends", "default_backend_name", "get_backend"]


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def default_backend_name() -> str:
    env = os.environ.get("TGCIMPUTE_BACKEND")
    if env:
        return env
    return "compiled" if "compiled" in _BACKENDS else "python"


def get_backend(name=None):
    """Resolve a backend module from a name, module, or None (default)."""
    if name is None:
        name = default_backend_name()
    if not isinstance(name, str):  # already a backend module
        return name
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ConfigError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        ) from None
