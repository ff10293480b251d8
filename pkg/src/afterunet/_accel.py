"""Backend switch for the hot loops.

``AFT_NUMBA=0`` forces the pure-numpy paths even when numba is importable.
Anything else (or unset) uses numba when it is available.
"""
import os
import warnings

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def _njit(*args, **kw):
        if len(args) == 1 and callable(args[0]) and not kw:
            return args[0]
        return lambda f: f


def numba_enabled():
    flag = os.environ.get("AFT_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return False
    if not HAVE_NUMBA:
        warnings.warn("numba is not installed - falling back to numpy kernels")
        return False
    return True


def njit(*args, **kw):
    kw.setdefault("cache", True)
    return _njit(*args, **kw)
