"""Pure-numpy reference implementations of the hot kernels.

Semantics here are the contract; the numba twins in :mod:`kernels_numba`
must agree (up to float rounding of reduction order, which both sides keep
fixed and deterministic).
"""

from __future__ import annotations

import numpy as np


def hash_cells(cells: np.ndarray, primes: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash of integer lattice coords ``cells`` (m, 3) into [0, table_size).

    XOR of per-axis products in wrapping uint32 arithmetic; ``table_size``
    must be a power of two.
    """
    c = cells.astype(np.uint32)
    p = primes.astype(np.uint32)
    h = (c[:, 0] * p[0]) ^ (c[:, 1] * p[1]) ^ (c[:, 2] * p[2])
    return (h & np.uint32(table_size - 1)).astype(np.int64)


_CORNER_OFFSETS = np.array(
    [[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64
)


def corner_blend(
    p: np.ndarray,
    resolution: int,
    dense: bool,
    primes: np.ndarray,
    table_size: int,
    with_jvp: bool,
):
    """Cell corner table indices and trilinear blend weights for points p.

    p lies in [0,1]^3; boundary points fold into the interior cell so the
    derivative columns (d weight / d coordinate, present when with_jvp)
    are one-sided toward +.  Returns (idx (n,8) int64, w (n,8,1|4) f64).
    """
    x = p * resolution
    i0 = np.minimum(np.floor(x), resolution - 1).astype(np.int64)
    u = (x - i0).astype(np.float64)
    corners = i0[:, None, :] + _CORNER_OFFSETS[None, :, :]
    if dense:
        v = resolution + 1
        idx = (corners[..., 0] * v + corners[..., 1]) * v + corners[..., 2]
    else:
        idx = hash_cells(corners.reshape(-1, 3), primes, table_size).reshape(-1, 8)
    sel = _CORNER_OFFSETS[None, :, :]
    w_axis = np.where(sel == 1, u[:, None, :], 1.0 - u[:, None, :])
    w0 = w_axis[..., 0] * w_axis[..., 1] * w_axis[..., 2]
    if not with_jvp:
        return idx, w0[..., None]
    sign = np.where(sel == 1, 1.0, -1.0)
    out = np.empty((p.shape[0], 8, 4), dtype=np.float64)
    out[..., 0] = w0
    out[..., 1] = sign[..., 0] * w_axis[..., 1] * w_axis[..., 2] * resolution
    out[..., 2] = sign[..., 1] * w_axis[..., 0] * w_axis[..., 2] * resolution
    out[..., 3] = sign[..., 2] * w_axis[..., 0] * w_axis[..., 1] * resolution
    return idx, out


def gather_blend_fwd(table: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """out[n, j, f] = sum_c w[n, c, j] * table[idx[n, c], f]."""
    gathered = table[idx]  # (n, 8, F)
    return np.einsum("ncj,ncf->njf", w, gathered)


def gather_blend_bwd(
    table_size: int, idx: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> np.ndarray:
    """Adjoint of gather_blend_fwd w.r.t. the table (deterministic scatter-add)."""
    n, _, f = grad_out.shape
    grad_pts = np.einsum("ncj,njf->ncf", w, grad_out)  # (n, 8, F)
    grad_table = np.zeros((table_size, f), dtype=grad_out.dtype)
    np.add.at(grad_table, idx.reshape(-1), grad_pts.reshape(-1, f))
    return grad_table


def _primitive_sdf(
    p: np.ndarray,
    kinds: np.ndarray,
    centers: np.ndarray,
    params: np.ndarray,
    inverted: np.ndarray,
) -> np.ndarray:
    """Signed distances of points (n, 3) to each primitive, shape (n, P)."""
    n = p.shape[0]
    out = np.empty((n, len(kinds)), dtype=p.dtype)
    for j, kind in enumerate(kinds):
        if kind == 0:  # sphere
            out[:, j] = np.linalg.norm(p - centers[j], axis=-1) - params[j, 0]
        elif kind == 1:  # box
            q = np.abs(p - centers[j]) - params[j, :3]
            outer = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inner = np.minimum(np.max(q, axis=-1), 0.0)
            out[:, j] = outer + inner
        else:  # plane
            out[:, j] = p @ params[j, :3] - params[j, 3]
        if inverted[j]:
            out[:, j] = -out[:, j]
    return out


def sphere_trace(
    origins: np.ndarray,
    dirs: np.ndarray,
    kinds: np.ndarray,
    centers: np.ndarray,
    params: np.ndarray,
    inverted: np.ndarray,
    t_start: np.ndarray,
    t_max: np.ndarray,
    max_steps: int,
    hit_eps: float,
):
    """March each ray by the scene SDF until |d| <= hit_eps or the budget runs out.

    Returns (hit, t_hit, prim_index, exhausted); prim_index is the argmin
    primitive at the hit point, -1 on miss.
    """
    n = origins.shape[0]
    t = t_start.astype(np.float64).copy()
    hit = np.zeros(n, dtype=bool)
    exhausted = np.zeros(n, dtype=bool)
    prim = np.full(n, -1, dtype=np.int64)
    active = t <= t_max
    for _ in range(max_steps):
        if not active.any():
            break
        pa = origins[active] + t[active, None] * dirs[active]
        d = _primitive_sdf(pa, kinds, centers, params, inverted)
        dmin = d.min(axis=1)
        arg = d.argmin(axis=1)
        idx = np.flatnonzero(active)
        got = np.abs(dmin) <= hit_eps
        hit_idx = idx[got]
        hit[hit_idx] = True
        prim[hit_idx] = arg[got]
        active[hit_idx] = False
        inside = dmin < -hit_eps  # started (or stepped) into solid: a miss
        active[idx[inside]] = False
        step = ~got & ~inside
        step_idx = idx[step]
        t[step_idx] += dmin[step]
        over = step_idx[t[step_idx] > t_max[step_idx]]
        active[over] = False
    exhausted[active] = True
    return hit, t, prim, exhausted


def nn_bruteforce(a: np.ndarray, b: np.ndarray, metric: int = 1) -> np.ndarray:
    """Exact nearest-neighbor distance from each row of ``a`` to the set ``b``.

    metric=1 gives L1 distances, metric=2 Euclidean. O(|a||b|), chunked.
    """
    out = np.empty(a.shape[0], dtype=np.float64)
    chunk = max(1, int(4e6) // max(1, b.shape[0]))
    for s in range(0, a.shape[0], chunk):
        diff = a[s : s + chunk, None, :] - b[None, :, :]
        if metric == 1:
            d = np.abs(diff).sum(axis=-1)
        else:
            d = np.sqrt((diff * diff).sum(axis=-1))
        out[s : s + chunk] = d.min(axis=1)
    return out
