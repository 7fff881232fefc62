"""glibc allocator tuning for the training loop.

Training allocates many short-lived arrays of a few hundred KB. Above glibc's
default mmap threshold each of these is mapped and unmapped, and the page
faults cost more than the arithmetic. Raising the thresholds keeps them on the
heap. No-op where glibc is unavailable.
"""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    global _done
    if _done:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = (ctypes.c_int, ctypes.c_int)
    ok = bool(mallopt(_M_MMAP_THRESHOLD, 256 << 20))
    ok &= bool(mallopt(_M_TRIM_THRESHOLD, 1 << 30))
    ok &= bool(mallopt(_M_TOP_PAD, 64 << 20))
    _done = ok
    return ok
