"""Dispatch to the numba or numpy kernel twins (see :mod:`backend`)."""

from __future__ import annotations

from . import backend
from . import kernels_numpy

if backend.USE_NUMBA:
    from . import kernels_numba as _impl
else:
    _impl = kernels_numpy

hash_cells = _impl.hash_cells
corner_blend = _impl.corner_blend
gather_blend_fwd = _impl.gather_blend_fwd
gather_blend_bwd = _impl.gather_blend_bwd
sphere_trace = _impl.sphere_trace
nn_bruteforce = _impl.nn_bruteforce

# The numpy twins stay importable for oracle tests and benchmarks.
reference = kernels_numpy
