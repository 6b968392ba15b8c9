"""Numba switch for the hot kernels.

Set ``REPLIFT_DISABLE_NUMBA=1`` to route every kernel through its pure-numpy
fallback. ``REPLIFT_THREADS`` caps numba and torch worker threads.
"""

import functools
import os

_FALSY = {"", "0", "false", "no", "off"}


def _flag(name):
    return os.environ.get(name, "").strip().lower() not in _FALSY


try:
    import numba as nb

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    nb = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _flag("REPLIFT_DISABLE_NUMBA")

if NUMBA_AVAILABLE:
    njit = functools.partial(nb.njit, cache=True, nogil=True)
else:  # pragma: no cover

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def thread_cap():
    """Integer thread cap from REPLIFT_THREADS, or None when unset."""
    raw = os.environ.get("REPLIFT_THREADS", "").strip()
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"REPLIFT_THREADS must be >= 1, got {raw!r}")
    return n


def apply_thread_cap():
    n = thread_cap()
    if n is None:
        return
    if NUMBA_AVAILABLE:
        nb.set_num_threads(min(n, nb.config.NUMBA_NUM_THREADS))
    try:
        import torch
    except ImportError:  # pragma: no cover
        return
    torch.set_num_threads(n)
