"""Numba twins of the hot kernels in :mod:`kernels_numpy`.

Scatter-adds run single-threaded in a fixed loop order so gradient
accumulation stays deterministic; gathers and NN queries parallelize
freely because every output element is written once.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True)
def hash_cells(cells, primes, table_size):
    m = cells.shape[0]
    out = np.empty(m, dtype=np.int64)
    mask = np.uint32(table_size - 1)
    p0 = np.uint32(primes[0])
    p1 = np.uint32(primes[1])
    p2 = np.uint32(primes[2])
    for i in range(m):
        h = (
            (np.uint32(cells[i, 0]) * p0)
            ^ (np.uint32(cells[i, 1]) * p1)
            ^ (np.uint32(cells[i, 2]) * p2)
        )
        out[i] = np.int64(h & mask)
    return out


@njit(cache=True)
def corner_blend(p, resolution, dense, primes, table_size, with_jvp):
    n = p.shape[0]
    j = 4 if with_jvp else 1
    idx = np.empty((n, 8), dtype=np.int64)
    w = np.empty((n, 8, j), dtype=np.float64)
    v = resolution + 1
    mask = np.uint32(table_size - 1)
    p0 = np.uint32(primes[0])
    p1 = np.uint32(primes[1])
    p2 = np.uint32(primes[2])
    rmax = resolution - 1
    for i in range(n):
        x = p[i, 0] * resolution
        y = p[i, 1] * resolution
        z = p[i, 2] * resolution
        ix = min(int(np.floor(x)), rmax)
        iy = min(int(np.floor(y)), rmax)
        iz = min(int(np.floor(z)), rmax)
        ux = x - ix
        uy = y - iy
        uz = z - iz
        for c in range(8):
            cx = (c >> 2) & 1
            cy = (c >> 1) & 1
            cz = c & 1
            wx = ux if cx == 1 else 1.0 - ux
            wy = uy if cy == 1 else 1.0 - uy
            wz = uz if cz == 1 else 1.0 - uz
            if dense:
                idx[i, c] = ((ix + cx) * v + (iy + cy)) * v + (iz + cz)
            else:
                h = (
                    (np.uint32(ix + cx) * p0)
                    ^ (np.uint32(iy + cy) * p1)
                    ^ (np.uint32(iz + cz) * p2)
                )
                idx[i, c] = np.int64(h & mask)
            w[i, c, 0] = wx * wy * wz
            if with_jvp:
                sx = 1.0 if cx == 1 else -1.0
                sy = 1.0 if cy == 1 else -1.0
                sz = 1.0 if cz == 1 else -1.0
                w[i, c, 1] = sx * wy * wz * resolution
                w[i, c, 2] = sy * wx * wz * resolution
                w[i, c, 3] = sz * wx * wy * resolution
    return idx, w


@njit(cache=True, parallel=True)
def gather_blend_fwd(table, idx, w):
    n, c, j = w.shape
    f = table.shape[1]
    out = np.zeros((n, j, f), dtype=table.dtype)
    for i in prange(n):
        for k in range(c):
            row = idx[i, k]
            for jj in range(j):
                wv = w[i, k, jj]
                for ff in range(f):
                    out[i, jj, ff] += wv * table[row, ff]
    return out


@njit(cache=True)
def gather_blend_bwd(table_size, idx, w, grad_out):
    n, _, f = grad_out.shape
    c = idx.shape[1]
    j = w.shape[2]
    grad_table = np.zeros((table_size, f), dtype=grad_out.dtype)
    for i in range(n):
        for k in range(c):
            row = idx[i, k]
            for ff in range(f):
                acc = w[i, k, 0] * grad_out[i, 0, ff]
                for jj in range(1, j):
                    acc += w[i, k, jj] * grad_out[i, jj, ff]
                grad_table[row, ff] += acc
    return grad_table


@njit(cache=True, inline="always")
def _scene_min_sdf(px, py, pz, kinds, centers, params, inverted):
    best = 1e30
    arg = -1
    for j in range(kinds.shape[0]):
        if kinds[j] == 0:
            dx = px - centers[j, 0]
            dy = py - centers[j, 1]
            dz = pz - centers[j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz) - params[j, 0]
        elif kinds[j] == 1:
            qx = abs(px - centers[j, 0]) - params[j, 0]
            qy = abs(py - centers[j, 1]) - params[j, 1]
            qz = abs(pz - centers[j, 2]) - params[j, 2]
            ox = qx if qx > 0.0 else 0.0
            oy = qy if qy > 0.0 else 0.0
            oz = qz if qz > 0.0 else 0.0
            inner = max(qx, max(qy, qz))
            if inner > 0.0:
                inner = 0.0
            d = np.sqrt(ox * ox + oy * oy + oz * oz) + inner
        else:
            d = px * params[j, 0] + py * params[j, 1] + pz * params[j, 2] - params[j, 3]
        if inverted[j]:
            d = -d
        if d < best:
            best = d
            arg = j
    return best, arg


@njit(cache=True, parallel=True)
def sphere_trace(
    origins, dirs, kinds, centers, params, inverted, t_start, t_max, max_steps, hit_eps
):
    n = origins.shape[0]
    t = np.empty(n, dtype=np.float64)
    hit = np.zeros(n, dtype=np.bool_)
    exhausted = np.zeros(n, dtype=np.bool_)
    prim = np.full(n, -1, dtype=np.int64)
    for i in prange(n):
        ti = t_start[i]
        done = ti > t_max[i]
        step = 0
        while not done and step < max_steps:
            px = origins[i, 0] + ti * dirs[i, 0]
            py = origins[i, 1] + ti * dirs[i, 1]
            pz = origins[i, 2] + ti * dirs[i, 2]
            d, arg = _scene_min_sdf(px, py, pz, kinds, centers, params, inverted)
            if abs(d) <= hit_eps:
                hit[i] = True
                prim[i] = arg
                done = True
            elif d < -hit_eps:
                done = True  # inside solid: a miss, not a surface hit
            else:
                ti += d
                if ti > t_max[i]:
                    done = True
            step += 1
        if not done:
            exhausted[i] = True
        t[i] = ti
    return hit, t, prim, exhausted


@njit(cache=True, parallel=True)
def nn_bruteforce(a, b, metric=1):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in prange(n):
        best = 1e300
        for j in range(m):
            if metric == 1:
                d = (
                    abs(a[i, 0] - b[j, 0])
                    + abs(a[i, 1] - b[j, 1])
                    + abs(a[i, 2] - b[j, 2])
                )
            else:
                dx = a[i, 0] - b[j, 0]
                dy = a[i, 1] - b[j, 1]
                dz = a[i, 2] - b[j, 2]
                d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d < best:
                best = d
        out[i] = best
    return out
