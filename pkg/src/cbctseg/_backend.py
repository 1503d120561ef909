"""Select the compiled kernels when available, else the numpy fallback.

``CBCTSEG_BACKEND=python`` forces the fallback; ``CBCTSEG_NUM_THREADS`` sets
the thread count used by the compiled kernels (default: all CPUs).
"""

import os

from . import _fallback

NAME = "python"
kernels = _fallback

if os.environ.get("CBCTSEG_BACKEND", "").lower() not in ("python", "numpy", "fallback"):
    try:
        from . import _kernels as kernels  # noqa: F811
        NAME = "cython"
    except ImportError:
        pass


def num_threads() -> int:
    value = os.environ.get("CBCTSEG_NUM_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ValueError(f"CBCTSEG_NUM_THREADS must be an integer, got {value!r}") from None
    return os.cpu_count() or 1


def get(name: str):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
