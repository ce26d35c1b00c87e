import numpy as np
import pytest
from hypothesis import given, strategies as st

from ppl.patchgrid import (
    PatchGrid,
    PatchIndex,
    PatchLabelMap,
    mask_patch,
    patch_pixel_bounds,
    replace_patches,
    select_random_patches,
    tile_patch,
)

grids = st.builds(
    lambda p, r, c: PatchGrid(p * r, p * c, p),
    st.integers(1, 8), st.integers(1, 5), st.integers(1, 5),
)


def test_bounds_examples():
    assert patch_pixel_bounds(PatchGrid(28, 28, 14), PatchIndex(0, 0)) == (0, 0, 14, 14)
    assert patch_pixel_bounds(PatchGrid(28, 28, 14), PatchIndex(1, 1)) == (14, 14, 14, 14)
    assert patch_pixel_bounds(PatchGrid(112, 112, 14), PatchIndex(7, 7)) == (98, 98, 14, 14)


def test_default_grid_has_64_patches():
    g = PatchGrid(112, 112)
    assert g.patch_size == 14 and (g.rows, g.cols, g.num_patches) == (8, 8, 64)


@pytest.mark.parametrize("h,w,p", [(28, 27, 14), (10, 10, 3), (0, 14, 14), (14, 14, 0)])
def test_grid_rejects_non_dividing(h, w, p):
    with pytest.raises(ValueError):
        PatchGrid(h, w, p)


def test_out_of_range_index():
    g = PatchGrid(28, 28, 14)
    with pytest.raises(IndexError):
        patch_pixel_bounds(g, PatchIndex(2, 0))
    with pytest.raises(IndexError):
        g.index(4)


@given(grids)
def test_bounds_tile_image_exactly(g):
    cover = np.zeros((g.image_h, g.image_w), dtype=np.int64)
    for idx in g.indices():
        top, left, h, w = patch_pixel_bounds(g, idx)
        cover[top:top + h, left:left + w] += 1
    assert (cover == 1).all()


@given(grids)
def test_flat_index_is_row_major(g):
    for k in range(g.num_patches):
        idx = g.index(k)
        assert idx == PatchIndex(k // g.cols, k % g.cols)
        assert g.flat(idx) == k


def test_mask_patch_examples():
    g = PatchGrid(28, 28, 14)
    zeros = np.zeros((28, 28, 3), dtype=np.float32)
    assert np.array_equal(mask_patch(zeros, g, PatchIndex(1, 0)), zeros)
    ones = np.ones((28, 28, 1), dtype=np.float32)
    out = mask_patch(ones, g, PatchIndex(0, 0))
    assert (out == 0).sum() == 196
    assert (out[:14, :14] == 0).all() and out.sum() == 28 * 28 - 196


@given(grids, st.integers(0, 2 ** 31 - 1))
def test_mask_patch_sum_oracle_and_purity(g, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((g.image_h, g.image_w, 2))
    before = img.copy()
    k = int(rng.integers(g.num_patches))
    out = mask_patch(img, g, g.index(k))
    top, left, h, w = patch_pixel_bounds(g, g.index(k))
    assert np.isclose(out.sum(), img.sum() - img[top:top + h, left:left + w].sum())
    assert np.array_equal(img, before)
    keep = np.ones(img.shape, bool)
    keep[top:top + h, left:left + w] = False
    assert np.array_equal(out[keep], img[keep])


def test_mask_patch_shape_mismatch():
    with pytest.raises(ValueError):
        mask_patch(np.zeros((28, 14, 3)), PatchGrid(28, 28, 14), PatchIndex(0, 0))


def test_replace_patches_examples():
    g = PatchGrid(28, 28, 14)
    dst = np.full((28, 28, 3), 0.2, np.float32)
    src = np.full((28, 28, 3), 0.8, np.float32)
    assert np.array_equal(replace_patches(dst, src, g, set()), dst)
    assert np.array_equal(replace_patches(dst, src, g, set(g.indices())), src)
    out = replace_patches(dst, src, g, {PatchIndex(0, 0)})
    assert (out[:14, :14] == np.float32(0.8)).all()
    out[:14, :14] = np.float32(0.2)
    assert (out == np.float32(0.2)).all()


def test_replace_patches_errors():
    g = PatchGrid(28, 28, 14)
    with pytest.raises(ValueError):
        replace_patches(np.zeros((28, 28, 3)), np.zeros((28, 28, 1)), g, set())
    with pytest.raises(IndexError):
        replace_patches(np.zeros((28, 28, 3)), np.zeros((28, 28, 3)), g, {PatchIndex(5, 5)})


@given(grids, st.integers(0, 2 ** 31 - 1))
def test_replace_then_restore_is_identity(g, seed):
    rng = np.random.default_rng(seed)
    dst = rng.random((g.image_h, g.image_w, 3))
    src = rng.random((g.image_h, g.image_w, 3))
    sel = select_random_patches(g, int(rng.integers(g.num_patches + 1)), rng)
    dst0, src0 = dst.copy(), src.copy()
    hybrid = replace_patches(dst, src, g, sel)
    assert np.array_equal(replace_patches(hybrid, dst, g, sel), dst)
    assert np.array_equal(dst, dst0) and np.array_equal(src, src0)
    for idx in g.indices():
        top, left, h, w = patch_pixel_bounds(g, idx)
        want = src if idx in sel else dst
        assert np.array_equal(hybrid[top:top + h, left:left + w], want[top:top + h, left:left + w])


def test_select_examples():
    g = PatchGrid(112, 112, 14)
    assert select_random_patches(g, 0, 5) == frozenset()
    assert select_random_patches(g, 64, 5) == frozenset(g.indices())
    with pytest.raises(ValueError):
        select_random_patches(g, 65, 5)
    with pytest.raises(ValueError):
        select_random_patches(g, -1, 5)


@given(grids, st.data())
def test_select_count_distinct_and_reproducible(g, data):
    count = data.draw(st.integers(0, g.num_patches))
    seed = data.draw(st.integers(0, 2 ** 31 - 1))
    a = select_random_patches(g, count, seed)
    assert len(a) == count
    assert a == select_random_patches(g, count, np.random.default_rng(seed))


def test_select_uniform_frequency():
    # Monte-Carlo oracle: each of 64 patches picked with frequency 0.5 when drawing 32
    g = PatchGrid(112, 112, 14)
    rng = np.random.default_rng(0)
    hits = np.zeros(64)
    n = 10_000
    for _ in range(n):
        for idx in select_random_patches(g, 32, rng):
            hits[g.flat(idx)] += 1
    assert np.abs(hits / n - 0.5).max() < 0.02


def test_label_map_validation():
    g = PatchGrid(28, 28, 14)
    with pytest.raises(ValueError):
        PatchLabelMap(g, (0, 1, 0))
    with pytest.raises(ValueError):
        PatchLabelMap(g, (0, 1, 2, 0))
    m = PatchLabelMap.from_selection(g, {PatchIndex(1, 0)})
    assert m.labels == (0, 0, 1, 0)
    d = PatchLabelMap.from_selection(g, {PatchIndex(0, 1)}, value=PatchLabelMap.EXCLUDED, background=1)
    assert d.labels == (1, -1, 1, 1) and d.count(PatchLabelMap.EXCLUDED) == 1


def test_tile_patch_structure():
    g = PatchGrid(42, 28, 14)
    rng = np.random.default_rng(3)
    img = rng.random((42, 28, 3))
    out = tile_patch(img, g, PatchIndex(2, 1))
    src = img[28:42, 14:28]
    for idx in g.indices():
        top, left, h, w = patch_pixel_bounds(g, idx)
        assert np.array_equal(out[top:top + h, left:left + w], src)
    const = np.full((42, 28, 3), 0.3)
    assert np.array_equal(tile_patch(const, g, PatchIndex(0, 0)), const)
