"""Kernel backend selection.

The compiled Cython extension is preferred when present; the numpy
reference implementation is the fallback. Set MTSR_KERNEL_BACKEND to
"python" or "compiled" to force a choice (the benchmark uses this).
"""

import ctypes
import os

from . import reference


def _tune_allocator():
    """Keep large numpy temporaries on the glibc heap.

    Column matrices are tens of MB and short-lived; by default glibc
    serves them with mmap/munmap, so every training step pays fresh
    page faults. Raising the mmap and trim thresholds lets the arena
    recycle those pages (2-4x faster conv steps). No-op off glibc; set
    MTSR_NO_MALLOC_TUNE=1 to skip.
    """
    if os.environ.get("MTSR_NO_MALLOC_TUNE"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

_choice = os.environ.get("MTSR_KERNEL_BACKEND", "auto")

if _choice == "python":
    _impl = reference
elif _choice == "compiled":
    from . import _convnd as _impl
else:
    try:
        from . import _convnd as _impl
    except ImportError:
        _impl = reference

BACKEND = _impl.BACKEND
vol2col = _impl.vol2col
col2vol = _impl.col2vol
out_extent = reference.out_extent


def has_compiled_kernels() -> bool:
    return BACKEND == "compiled"
