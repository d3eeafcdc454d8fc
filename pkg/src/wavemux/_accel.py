"""Backend selection for the hot kernels.

Kernels come in pairs: a numba ``@njit`` loop and a vectorised numpy path that
produces the same numbers.  The numba path is the default when numba imports;
set ``WAVEMUX_DISABLE_JIT=1`` to force the numpy path for the whole process.
"""
import contextlib
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency, but keep the fallback honest
    numba = None
    HAVE_NUMBA = False

_DISABLED = os.environ.get("WAVEMUX_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes", "on")
_backend = "numba" if (HAVE_NUMBA and not _DISABLED) else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` with caching and GIL release on by default.

    Without numba the function is returned undecorated, so the kernel module
    still imports; callers never reach it because ``backend()`` says numpy.
    """
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _backend = name


@contextlib.contextmanager
def use_backend(name):
    """Temporarily switch backend (used by the equivalence tests and the benchmark)."""
    old = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(old)
