"""Optional numba acceleration.

Hot kernels are written once as plain Python/numpy loops and decorated with
:func:`njit`.  When numba is importable and ``PIPEPLAN_DISABLE_NUMBA`` is not
set to a truthy value, the decorator compiles them; otherwise it returns the
function untouched and callers use their vectorized numpy path instead.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("PIPEPLAN_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    _numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity otherwise.

    fastmath is never enabled: kernels must stay bitwise identical to the
    numpy fallback.
    """
    kwargs.pop("fastmath", None)

    def wrap(fn):
        if not HAVE_NUMBA:
            return fn
        return _numba.njit(cache=False, **kwargs)(fn)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return wrap(args[0])
    return wrap


def backend_name() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
