"""Optional numba acceleration.

Kernels are written in the nopython subset and compiled with ``njit`` when
numba is importable.  Setting ``GDALLOC_DISABLE_JIT=1`` runs the same code as
plain Python/numpy, which is slow but handy for debugging and for checking the
compiled path against the interpreted one.
"""

import logging
import os

logger = logging.getLogger(__name__)

JIT_DISABLED = os.environ.get("GDALLOC_DISABLE_JIT", "").lower() in ("1", "true", "yes")

try:
    if JIT_DISABLED:
        raise ImportError("disabled by GDALLOC_DISABLE_JIT")
    import numba

    HAVE_NUMBA = True

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return numba.njit(*args, **kwargs)

except ImportError as exc:
    HAVE_NUMBA = False
    logger.debug("numba unavailable (%s); using interpreted kernels", exc)

    def njit(pyfunc=None, **kwargs):
        def wrap(func):
            return func

        return wrap if pyfunc is None else wrap(pyfunc)


def python_impl(func):
    """Return the interpreted version of a kernel (``py_func`` when jitted)."""
    return getattr(func, "py_func", func)
