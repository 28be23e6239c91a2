"""Kernel backend selection.

Hot inner loops exist twice: a numba ``@njit`` version and a pure-numpy
twin with identical semantics.  The numpy path is selected by setting the
environment variable ``SDFRECON_NO_NUMBA=1`` before import, and is also
used automatically when numba is not importable.  ``benchmarks/bench_kernels.py``
compares the two.
"""

from __future__ import annotations

import os

_ENV_FLAG = "SDFRECON_NO_NUMBA"

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get(_ENV_FLAG, "0") not in ("1", "true", "yes")


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def set_num_threads(n: int) -> None:
    """Cap worker threads for the numba layer (no-op on the numpy path)."""
    if USE_NUMBA:
        import numba

        numba.set_num_threads(max(1, n))
