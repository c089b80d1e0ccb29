import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridpure.gridgeom import CORNER, REGULAR, crop_all, crop_tile, merge_tiles, plan_grids


def brute_coverage(h, w, G):
    """Enumerate origins with an explicit while-loop and count covering tiles per pixel."""
    S = G // 2

    def origins(n):
        out, o = [], 0
        while o + G <= n:
            out.append(o)
            o += S
        if out[-1] + G < n:
            out.append(n - G)
        return out

    rows, cols = origins(h), origins(w)
    cov = np.zeros((h, w), int)
    for r in rows:
        for c in cols:
            for i in range(r, r + G):
                cov[i, c : c + G] += 1
    n_tiles = len(rows) * len(cols)
    if len(rows) >= 2 and len(cols) >= 2:
        n_tiles += 1
        for i in range(h):
            for j in range(w):
                if (i < S or i >= h - S) and (j < S or j >= w - S):
                    cov[i, j] += 1
    return n_tiles, cov


def test_512_plan_has_ten_tiles():
    plan = plan_grids(512, 512, 256, True)
    assert len(plan) == 10
    regular = [t for t in plan.tiles if t.kind == REGULAR]
    assert sorted((t.rects[0][0][0], t.rects[0][0][1]) for t in regular) == [
        (r, c) for r in (0, 128, 256) for c in (0, 128, 256)
    ]
    assert plan.tiles[-1].kind == CORNER
    assert len(plan.tiles[-1].rects) == 4
    assert plan.coverage.min() >= 2


def test_single_tile_plan():
    plan = plan_grids(256, 256, 256, True)
    assert len(plan) == 1
    assert plan.coverage.min() == 1


def test_384_plan_against_brute_force():
    plan = plan_grids(384, 384, 256, True)
    n, cov = brute_coverage(384, 384, 256)
    assert len(plan) == n == 5
    assert np.array_equal(plan.coverage, cov)
    assert cov.min() == 2


@pytest.mark.parametrize("h,w", [(300, 300), (512, 384), (700, 520), (257, 1000)])
def test_coverage_matches_brute_force(h, w):
    plan = plan_grids(h, w, 256, True)
    n, cov = brute_coverage(h, w, 256)
    assert len(plan) == n
    assert np.array_equal(plan.coverage, cov)


def test_coverage_sweep_at_least_two():
    # sizes strictly above G; at exactly G the plan is a single tile
    for h in range(264, 1025, 40):
        for w in range(264, 1025, 56):
            plan = plan_grids(h, w, 256, True)
            assert plan.coverage.min() >= 2, (h, w)
            assert sum(t.height * t.width for t in plan.tiles) == plan.coverage.sum()


def test_small_grid_sweep_matches_brute_force():
    for h in range(8, 41, 3):
        for w in range(8, 41, 5):
            plan = plan_grids(h, w, 8, True)
            n, cov = brute_coverage(h, w, 8)
            assert len(plan) == n and np.array_equal(plan.coverage, cov), (h, w)
            assert sum(t.height * t.width for t in plan.tiles) == plan.coverage.sum()


def test_degenerate_small_image():
    plan = plan_grids(100, 300, 256, True)
    assert len(plan) == 1
    assert (plan.tiles[0].height, plan.tiles[0].width) == (100, 300)


@pytest.mark.parametrize("G", [0, -4, 255])
def test_plan_rejects_bad_tile_size(G):
    with pytest.raises(ValueError):
        plan_grids(512, 512, G)


def test_crop_constant_and_corner_quadrants():
    img = np.zeros((64, 64, 1))
    img[:8, :8] = 0.1
    img[:8, -8:] = 0.2
    img[-8:, :8] = 0.3
    img[-8:, -8:] = 0.4
    plan = plan_grids(64, 64, 16, True)
    corner = crop_tile(img, plan.tiles[-1])
    assert np.all(corner[:8, :8] == 0.1)
    assert np.all(corner[:8, 8:] == 0.2)
    assert np.all(corner[8:, :8] == 0.3)
    assert np.all(corner[8:, 8:] == 0.4)
    const = np.full((64, 64, 3), 0.7)
    assert np.all(crop_tile(const, plan.tiles[0]) == 0.7)


def test_crop_dimension_mismatch():
    plan = plan_grids(64, 64, 16)
    with pytest.raises(ValueError, match="dimension mismatch"):
        crop_tile(np.zeros((32, 32, 3)), plan.tiles[0], plan)


def test_merge_mean_of_two():
    plan = plan_grids(24, 16, 16, with_corner=False)  # two tiles overlapping rows 8..15
    assert len(plan) == 2
    merged = merge_tiles(plan, [np.zeros((16, 16, 1)), np.ones((16, 16, 1))])
    assert np.all(merged[8:16] == 0.5)
    assert np.all(merged[:8] == 0.0)
    assert np.all(merged[16:] == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(16, 80), st.integers(16, 80), st.integers(0, 2**31 - 1))
def test_merge_crop_identity_bit_exact(h, w, seed):
    img = np.random.default_rng(seed).random((h, w, 3))
    plan = plan_grids(h, w, 16, True)
    assert np.array_equal(merge_tiles(plan, crop_all(img, plan)), img)


def test_merge_matches_per_pixel_oracle():
    plan = plan_grids(512, 512, 256, True)
    gen = np.random.default_rng(5)
    tiles = [gen.random((256, 256, 1)) for _ in plan.tiles]
    merged = merge_tiles(plan, tiles)
    # independent oracle: scatter each tile pixel by pixel via explicit index maps
    total = np.zeros((512, 512))
    count = np.zeros((512, 512))
    for tile, data in zip(plan.tiles, tiles):
        for (st_, sl, sh, sw), (tt, tl, _, _) in tile.rects:
            ii, jj = np.meshgrid(np.arange(sh), np.arange(sw), indexing="ij")
            np.add.at(total, (st_ + ii, sl + jj), data[tt + ii, tl + jj, 0])
            np.add.at(count, (st_ + ii, sl + jj), 1)
    assert np.allclose(merged[..., 0], total / count, rtol=0, atol=1e-15)


def test_merge_linearity():
    plan = plan_grids(48, 40, 16, True)
    gen = np.random.default_rng(1)
    t1 = [gen.random((16, 16, 3)) for _ in plan.tiles]
    t2 = [gen.random((16, 16, 3)) for _ in plan.tiles]
    a, b = 0.3, -1.7
    lhs = merge_tiles(plan, [a * x + b * y for x, y in zip(t1, t2)])
    rhs = a * merge_tiles(plan, t1) + b * merge_tiles(plan, t2)
    assert np.allclose(lhs, rhs, atol=1e-13)


def test_merge_errors():
    plan = plan_grids(48, 48, 16)
    with pytest.raises(ValueError, match="tile count"):
        merge_tiles(plan, [np.zeros((16, 16, 1))])
    with pytest.raises(ValueError, match="tile size"):
        merge_tiles(plan, [np.zeros((8, 8, 1))] * len(plan))
