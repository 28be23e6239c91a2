"""Multi-resolution feature grid with spatial hashing.

Level resolutions are geometrically spaced between a coarsest and finest
resolution.  Coarse levels whose full vertex lattice fits in the table
are stored densely; finer levels index a fixed-size table through an
XOR/prime spatial hash in wrapping uint32 arithmetic.  Queries are
trilinearly interpolated and concatenated across levels, then appended
with a fixed-frequency sine/cosine embedding of the (centered) point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels

DEFAULT_PRIMES = (1, 2654435761, 805459861)

# corner c in 0..7 decodes to offsets ((c>>2)&1, (c>>1)&1, c&1)
_CORNERS = np.array(
    [[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64
)


@dataclass(frozen=True)
class GridConfig:
    levels: int = 16
    r_min: int = 16
    r_max: int = 2048
    table_size: int = 2**19
    features: int = 2
    primes: tuple = DEFAULT_PRIMES
    pe_bands: int = 6

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if not (0 < self.r_min < self.r_max):
            raise ValueError("need 0 < r_min < r_max")
        if self.table_size & (self.table_size - 1) != 0:
            raise ValueError("table_size must be a power of two")
        if self.primes[0] != 1:
            raise ValueError("first hash prime must be 1")
        for p in self.primes[1:]:
            if p <= 2**29 or p % 2 == 0:
                raise ValueError("hash primes must be odd and large (> 2^29)")
        if self.pe_bands < 0:
            raise ValueError("pe_bands must be >= 0")

    @property
    def pe_dim(self) -> int:
        return 3 + 6 * self.pe_bands

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features + self.pe_dim


def level_resolutions(cfg: GridConfig) -> list[int]:
    """Per-level grid resolutions floor(r_min * b^l), geometrically spaced."""
    step = (np.log(cfg.r_max) - np.log(cfg.r_min)) / (cfg.levels - 1)
    res = [
        int(np.floor(cfg.r_min * np.exp(l * step) + 1e-6)) for l in range(cfg.levels)
    ]
    return res


def level_is_dense(cfg: GridConfig) -> list[bool]:
    # dense only when the full vertex lattice fits in one table
    return [(r + 1) ** 3 <= cfg.table_size for r in level_resolutions(cfg)]


def level_table_sizes(cfg: GridConfig) -> list[int]:
    return [
        (r + 1) ** 3 if dense else cfg.table_size
        for r, dense in zip(level_resolutions(cfg), level_is_dense(cfg))
    ]


def hash_index(cells: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """Hash integer lattice coords (..., 3) into [0, table_size)."""
    cells = np.asarray(cells, dtype=np.int64)
    flat = cells.reshape(-1, 3)
    out = kernels.hash_cells(flat, np.asarray(cfg.primes, dtype=np.uint64), cfg.table_size)
    return out.reshape(cells.shape[:-1])


def init_tables(
    cfg: GridConfig, rng: np.random.Generator, scale: float = 1e-4, dtype=np.float64
) -> list[np.ndarray]:
    return [
        rng.uniform(-scale, scale, size=(n, cfg.features)).astype(dtype)
        for n in level_table_sizes(cfg)
    ]


def clamp_to_cube(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp points into [0,1]^3; second return flags the rows that moved."""
    q = np.clip(p, 0.0, 1.0)
    return q, np.any(q != p, axis=-1)


def positional_encoding(p: np.ndarray, bands: int, with_jvp: bool = False):
    """Fixed-frequency embedding of centered coords c = 2p - 1.

    Returns (features (n, 3 + 6*bands), jvp (n, 3, D) or None); constant
    w.r.t. trainable parameters, so it enters the graph as plain data.
    """
    n = p.shape[0]
    c = 2.0 * p - 1.0
    cols = [c]
    for j in range(bands):
        f = (2.0**j) * np.pi
        cols.append(np.sin(f * c))
        cols.append(np.cos(f * c))
    feats = np.concatenate(cols, axis=-1)
    if not with_jvp:
        return feats, None
    jvp = np.zeros((n, 3, feats.shape[1]), dtype=p.dtype)
    eye = np.eye(3, dtype=p.dtype)
    jvp[:, :, 0:3] = 2.0 * eye[None]
    for j in range(bands):
        f = (2.0**j) * np.pi
        s0 = 3 + 6 * j
        dsin = 2.0 * f * np.cos(f * c)  # (n, 3)
        dcos = -2.0 * f * np.sin(f * c)
        jvp[:, :, s0 : s0 + 3] = dsin[:, None, :] * eye[None]
        jvp[:, :, s0 + 3 : s0 + 6] = dcos[:, None, :] * eye[None]
    return feats, jvp


def encode_graph(
    p: np.ndarray,
    cfg: GridConfig,
    tables: list,
    with_jvp: bool = False,
):
    """Build the encoding subgraph for already-clamped points p in [0,1]^3.

    ``tables`` are autodiff Tensors (or arrays for inference). Returns
    (features Tensor (n, D), jvp Tensor (n, 3, D) or None).
    """
    tables = [t if isinstance(t, ad.Tensor) else ad.Tensor(t) for t in tables]
    res = level_resolutions(cfg)
    dense = level_is_dense(cfg)
    primes = np.asarray(cfg.primes, dtype=np.uint64)
    feat_parts = []
    jvp_parts = []
    for lvl in range(cfg.levels):
        idx, w = kernels.corner_blend(
            np.ascontiguousarray(p, dtype=np.float64),
            res[lvl],
            dense[lvl],
            primes,
            cfg.table_size,
            with_jvp,
        )
        blended = ad.gather_blend(tables[lvl], idx, w)  # (n, 1 or 4, F)
        feat_parts.append(blended[:, 0, :])
        if with_jvp:
            jvp_parts.append(blended[:, 1:4, :])
    pe, pe_jvp = positional_encoding(p, cfg.pe_bands, with_jvp)
    feats = ad.concat(feat_parts + [ad.Tensor(pe)], axis=-1)
    if not with_jvp:
        return feats, None
    jvp = ad.concat(jvp_parts + [ad.Tensor(pe_jvp)], axis=-1)
    return feats, jvp


def encode(p: np.ndarray, cfg: GridConfig, tables: list[np.ndarray]):
    """Numpy-facing encode: clamps out-of-cube points and flags them."""
    q, clamped = clamp_to_cube(np.asarray(p, dtype=tables[0].dtype))
    with ad.no_grad():
        feats, _ = encode_graph(q, cfg, tables, with_jvp=False)
    return feats.data, clamped
