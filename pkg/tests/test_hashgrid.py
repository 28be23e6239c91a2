import numpy as np
import pytest

from sdfrecon import kernels_numpy
from sdfrecon.hashgrid import (
    GridConfig,
    clamp_to_cube,
    encode,
    hash_index,
    init_tables,
    level_is_dense,
    level_resolutions,
    level_table_sizes,
    positional_encoding,
)

PAPER_CFG = GridConfig()  # L=16, 16..2048, T=2^19, F=2


def test_level_resolutions_paper_endpoints_and_derived_values():
    res = level_resolutions(PAPER_CFG)
    assert res[0] == 16 and res[15] == 2048
    # hand evaluation with b = (2048/16)^(1/15)
    b = (2048 / 16) ** (1 / 15)
    assert res[1] == int(np.floor(16 * b)) == 22
    assert res[2] == int(np.floor(16 * b * b)) == 30


def test_level_resolutions_monotone_and_two_level_case():
    res = level_resolutions(PAPER_CFG)
    assert all(b >= a for a, b in zip(res, res[1:]))
    assert level_resolutions(GridConfig(levels=2, r_min=16, r_max=2048)) == [16, 2048]


def test_grid_config_validation():
    with pytest.raises(ValueError):
        GridConfig(levels=1)
    with pytest.raises(ValueError):
        GridConfig(r_min=32, r_max=16)
    with pytest.raises(ValueError):
        GridConfig(table_size=1000)
    with pytest.raises(ValueError):
        GridConfig(primes=(2, 2654435761, 805459861))
    with pytest.raises(ValueError):
        GridConfig(primes=(1, 4, 805459861))


def test_hash_examples():
    assert hash_index(np.array([0, 0, 0]), PAPER_CFG) == 0
    assert hash_index(np.array([1, 0, 0]), PAPER_CFG) == 1
    # brute-force modular arithmetic with python ints
    expect = (2654435761 * 1) % 2**19
    assert hash_index(np.array([0, 1, 0]), PAPER_CFG) == expect


def test_hash_matches_python_int_oracle(rng):
    cfg = PAPER_CFG
    cells = rng.integers(0, 4096, size=(200, 3))
    got = hash_index(cells, cfg)
    mask32 = (1 << 32) - 1
    for (x, y, z), h in zip(cells.tolist(), got.tolist()):
        expect = (
            (x * cfg.primes[0] & mask32)
            ^ (y * cfg.primes[1] & mask32)
            ^ (z * cfg.primes[2] & mask32)
        ) % cfg.table_size
        assert h == expect


def test_dense_levels_fit_table():
    cfg = GridConfig(levels=4, r_min=4, r_max=64, table_size=2**10)
    dense = level_is_dense(cfg)
    sizes = level_table_sizes(cfg)
    res = level_resolutions(cfg)
    for r, d, s in zip(res, dense, sizes):
        assert d == ((r + 1) ** 3 <= cfg.table_size)
        assert s == ((r + 1) ** 3 if d else cfg.table_size)


def trilinear_oracle(p, cfg, tables):
    """Straight-line reimplementation: per level, walk the 8 corners."""
    res = level_resolutions(cfg)
    dense = level_is_dense(cfg)
    out = []
    for n in range(p.shape[0]):
        feats = []
        for lvl in range(cfg.levels):
            r = res[lvl]
            x = p[n] * r
            i0 = np.minimum(np.floor(x), r - 1).astype(np.int64)
            u = x - i0
            acc = np.zeros(cfg.features)
            for cx in (0, 1):
                for cy in (0, 1):
                    for cz in (0, 1):
                        wgt = (
                            (u[0] if cx else 1 - u[0])
                            * (u[1] if cy else 1 - u[1])
                            * (u[2] if cz else 1 - u[2])
                        )
                        cell = i0 + np.array([cx, cy, cz])
                        if dense[lvl]:
                            v = r + 1
                            idx = (cell[0] * v + cell[1]) * v + cell[2]
                        else:
                            idx = int(
                                (
                                    (int(cell[0]) * cfg.primes[0] & 0xFFFFFFFF)
                                    ^ (int(cell[1]) * cfg.primes[1] & 0xFFFFFFFF)
                                    ^ (int(cell[2]) * cfg.primes[2] & 0xFFFFFFFF)
                                )
                                % cfg.table_size
                            )
                        acc = acc + wgt * tables[lvl][idx]
            feats.append(acc)
        pe, _ = positional_encoding(p[n : n + 1], cfg.pe_bands)
        out.append(np.concatenate(feats + [pe[0]]))
    return np.array(out)


@pytest.fixture()
def small_cfg():
    return GridConfig(levels=4, r_min=3, r_max=24, table_size=2**9, features=2, pe_bands=3)


def test_encode_matches_trilinear_oracle(rng, small_cfg):
    tables = init_tables(small_cfg, rng, scale=1.0)
    p = rng.random((50, 3))
    got, clamped = encode(p, small_cfg, tables)
    assert not clamped.any()
    expect = trilinear_oracle(p, small_cfg, tables)
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_encode_vertex_and_center(rng, small_cfg):
    tables = init_tables(small_cfg, rng, scale=1.0)
    res = level_resolutions(small_cfg)
    # a point on an exact vertex of the coarsest level
    p = np.array([[1.0 / res[0], 2.0 / res[0], 1.0 / res[0]]])
    got, _ = encode(p, small_cfg, tables)
    expect = trilinear_oracle(p, small_cfg, tables)
    np.testing.assert_allclose(got, expect, atol=1e-12)
    # cell center of the coarsest level: mean of its 8 corner features
    pc = np.array([[1.5 / res[0], 0.5 / res[0], 2.5 / res[0]]])
    gc, _ = encode(pc, small_cfg, tables)
    corners = []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                v = res[0] + 1
                corners.append(tables[0][((1 + cx) * v + (0 + cy)) * v + (2 + cz)])
    np.testing.assert_allclose(gc[0, :2], np.mean(corners, axis=0), atol=1e-12)


def test_encode_continuity_across_cell_boundaries(rng, small_cfg):
    tables = init_tables(small_cfg, rng, scale=1.0)
    res = level_resolutions(small_cfg)
    worst = 0.0
    for _ in range(100):
        a = rng.random(3)
        # tiny segment straddling a finest-level cell boundary
        axis = rng.integers(3)
        k = rng.integers(1, res[-1])
        a[axis] = k / res[-1] - 1e-9
        b = a.copy()
        b[axis] = k / res[-1] + 1e-9
        fa, _ = encode(a[None], small_cfg, tables)
        fb, _ = encode(b[None], small_cfg, tables)
        worst = max(worst, float(np.max(np.abs(fa - fb))))
    assert worst < 1e-7  # trilinear weights are continuous; 2e-9 step x slope


def test_encode_clamps_and_flags(rng, small_cfg):
    tables = init_tables(small_cfg, rng)
    p = np.array([[1.2, 0.5, 0.5], [0.4, 0.4, 0.4]])
    got, clamped = encode(p, small_cfg, tables)
    assert clamped.tolist() == [True, False]
    inside, _ = encode(np.array([[1.0, 0.5, 0.5]]), small_cfg, tables)
    np.testing.assert_allclose(got[0], inside[0], atol=1e-15)


def test_clamp_to_cube():
    q, flag = clamp_to_cube(np.array([[0.5, -0.1, 0.3], [0.2, 0.2, 0.2]]))
    assert flag.tolist() == [True, False]
    assert q.min() >= 0.0 and q.max() <= 1.0


def test_corner_blend_twins_agree(rng):
    from sdfrecon import kernels_numba

    p = rng.random((64, 3))
    primes = np.array(PAPER_CFG.primes, dtype=np.uint64)
    for dense, resol, jvp in [(True, 7, True), (False, 33, True), (True, 7, False)]:
        i_np, w_np = kernels_numpy.corner_blend(p, resol, dense, primes, 2**9, jvp)
        i_nb, w_nb = kernels_numba.corner_blend(p, resol, dense, primes, 2**9, jvp)
        np.testing.assert_array_equal(i_np, i_nb)
        np.testing.assert_allclose(w_np, w_nb, atol=1e-15)


def test_positional_encoding_jvp_matches_fd(rng):
    p = rng.random((5, 3)) * 0.8 + 0.1
    feats, jvp = positional_encoding(p, 3, with_jvp=True)
    eps = 1e-6
    for ax in range(3):
        dp = np.zeros(3)
        dp[ax] = eps
        hi, _ = positional_encoding(p + dp, 3)
        lo, _ = positional_encoding(p - dp, 3)
        np.testing.assert_allclose(jvp[:, ax, :], (hi - lo) / (2 * eps), atol=1e-6)
