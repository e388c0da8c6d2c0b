import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_map, random_unit
from vqff.feature_io import FeatureMap, SyntheticSceneSpec, generate_synthetic_scene
from vqff.quantizer_local import (
    LocalCodebook,
    concat_image_codebook,
    grouped_spherical_means,
    quantize_patch,
    quantize_superpixel,
    reconstruct_local,
    spherical_mean,
)
from vqff.superpixel import Segmentation, relabel_raster, slic_segment
from vqff.vqff_store import cosine_fidelity


def per_pixel_cos(a: FeatureMap, b: FeatureMap) -> np.ndarray:
    return np.sum(a.data.astype(np.float64) * b.data.astype(np.float64), axis=-1)


def test_spherical_mean_singleton_is_bitwise():
    v = random_unit(np.random.default_rng(0), (1, 7))[0]
    assert spherical_mean([v]).tobytes() == v.tobytes()


def test_spherical_mean_symmetric_pair():
    out = spherical_mean(np.float32([[1, 0], [0, 1]]))
    assert np.allclose(out, [2**-0.5, 2**-0.5], atol=1e-7)


def test_spherical_mean_empty_raises():
    with pytest.raises(ValueError):
        spherical_mean(np.zeros((0, 3), np.float32))


def test_spherical_mean_antipodal_falls_back_to_first():
    v = np.float32([0.6, 0.8, 0.0])
    out, flagged = spherical_mean(np.stack([v, -v]), with_flag=True)
    assert flagged and out.tobytes() == v.tobytes()


@given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.integers(2, 12))
def test_spherical_mean_beats_random_candidates(seed, n, d):
    rng = np.random.default_rng(seed)
    pts = random_unit(rng, (n, d)).astype(np.float64)
    s = pts.sum(axis=0)
    if np.linalg.norm(s) < 1e-3:
        return
    mean = spherical_mean(pts.astype(np.float32)).astype(np.float64)
    cands = random_unit(rng, (200, d)).astype(np.float64)
    best = np.mean(1 - pts @ mean)
    assert np.all(best <= np.mean(1 - pts @ cands.T, axis=0) + 1e-6)


@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(1, 8))
def test_grouped_means_match_per_group_loop(seed, n, groups):
    rng = np.random.default_rng(seed)
    pts = random_unit(rng, (n, 5))
    g = rng.integers(0, groups, n)
    means, counts, _ = grouped_spherical_means(pts, g, groups)
    for k in range(groups):
        if counts[k]:
            assert np.allclose(means[k], spherical_mean(pts[g == k]), atol=1e-6)
        else:
            assert not means[k].any()


def test_constant_map_any_segmentation_exact():
    v = random_unit(np.random.default_rng(2), (1, 6))[0]
    fmap = FeatureMap(np.tile(v, (9, 11, 1)))
    img = np.random.default_rng(3).integers(0, 256, (9, 11, 3), dtype=np.uint8)
    seg = slic_segment(img, 12)
    book, imap = quantize_superpixel(fmap, seg)
    assert np.all(book.entries == v)
    assert reconstruct_local(book, imap).data.tobytes() == fmap.data.tobytes()


def test_noiseless_scene_with_aligned_segmentation_is_exact():
    scene = generate_synthetic_scene(SyntheticSceneSpec(num_images=2, num_scales=1, height=40, width=40, dim=8, num_regions=4, noise_sigma=0))
    for i, image_id in enumerate(scene.manifest.image_ids):
        labels = relabel_raster(scene.labels[i])
        seg = Segmentation(labels, int(labels.max()) + 1)
        book, imap = quantize_superpixel(scene.features[(image_id, 0)], seg)
        cos = per_pixel_cos(reconstruct_local(book, imap), scene.clean_map(i))
        assert np.all(np.abs(cos - 1) <= 1e-5)


def test_single_segment_reduces_to_global_mean():
    fmap = random_map(4, 6, 5, 4)
    seg = Segmentation(np.zeros((6, 5), dtype=np.int32), 1)
    book, imap = quantize_superpixel(fmap, seg)
    assert len(book) == 1 and not imap.any()
    assert np.array_equal(book.entries[0], spherical_mean(fmap.vectors()))


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        quantize_superpixel(random_map(0, 4, 4, 3), Segmentation(np.zeros((4, 5), dtype=np.int32), 1))


@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_cells_refine_global_mean_and_indices_valid(seed, n):
    fmap = random_map(seed, 10, 12, 6)
    img = np.random.default_rng(seed).integers(0, 256, (10, 12, 3), dtype=np.uint8)
    seg = slic_segment(img, n, max_iters=3)
    book, imap = quantize_superpixel(fmap, seg)
    assert len(book) <= seg.num_segments
    assert imap.max() < len(book)
    assert np.all(np.bincount(imap.ravel(), minlength=len(book)) > 0)
    assert np.all(np.abs(np.linalg.norm(book.entries.astype(np.float64), axis=1) - 1) <= 1e-4)
    glob = FeatureMap(np.broadcast_to(spherical_mean(fmap.vectors()), fmap.shape).copy())
    assert cosine_fidelity(fmap, reconstruct_local(book, imap)) >= cosine_fidelity(fmap, glob) - 1e-9


def test_patch_size_one_is_lossless():
    fmap = random_map(5, 7, 6, 4)
    book, imap = quantize_patch(fmap, 1)
    assert len(book) == 42
    assert reconstruct_local(book, imap).data.tobytes() == fmap.data.tobytes()


def test_patch_covering_image_is_global_mean():
    fmap = random_map(6, 8, 8, 4)
    book, _ = quantize_patch(fmap, 8)
    assert len(book) == 1
    assert np.array_equal(book.entries[0], spherical_mean(fmap.vectors()))


def test_patch_tiling_counts_edge_tiles():
    book, imap = quantize_patch(random_map(7, 10, 7, 3), 3)
    assert len(book) == 4 * 3
    assert imap[9, 6] == 11


def test_patch_rejects_bad_sizes():
    fmap = random_map(0, 4, 6, 3)
    for p in (0, -1, 5):
        with pytest.raises(ValueError):
            quantize_patch(fmap, p)


def test_superpixels_beat_patches_on_two_region_boundary():
    scene = generate_synthetic_scene(SyntheticSceneSpec(num_images=3, num_scales=1, height=64, width=64, dim=16, num_regions=2, noise_sigma=0, seed=8))
    for i, image_id in enumerate(scene.manifest.image_ids):
        fmap = scene.features[(image_id, 0)]
        pbook, pmap = quantize_patch(fmap, 8)
        seg = slic_segment(scene.rgb[image_id], len(pbook))
        sbook, smap = quantize_superpixel(fmap, seg)
        clean = scene.clean_map(i)
        assert cosine_fidelity(clean, reconstruct_local(sbook, smap)) > cosine_fidelity(clean, reconstruct_local(pbook, pmap))


def test_concat_offsets():
    rng = np.random.default_rng(0)
    a = LocalCodebook(random_unit(rng, (3, 4)), np.ones(3), "im", 0)
    b = LocalCodebook(random_unit(rng, (5, 4)), np.ones(5), "im", 1)
    ma = np.array([[0, 2], [1, 1]], dtype=np.uint32)
    mb = np.array([[4, 0], [3, 2]], dtype=np.uint32)
    entries, maps = concat_image_codebook([(a, ma), (b, mb)])
    assert entries.shape == (8, 4)
    assert np.array_equal(maps[0], ma) and np.array_equal(maps[1], mb + 3)
    assert np.array_equal(entries[maps[1]], b.entries[mb])
    one, (same,) = concat_image_codebook([(a, ma)])
    assert np.array_equal(one, a.entries) and np.array_equal(same, ma)


def test_concat_bound_and_errors():
    fmap0, fmap1 = random_map(1, 12, 12, 4), random_map(2, 12, 12, 4)
    img = np.random.default_rng(1).integers(0, 256, (12, 12, 3), dtype=np.uint8)
    seg = slic_segment(img, 9)
    parts = [quantize_superpixel(m, seg, image_id="x", scale_id=s) for s, m in enumerate([fmap0, fmap1])]
    entries, _ = concat_image_codebook(parts)
    assert len(entries) <= 2 * seg.num_segments
    other = quantize_superpixel(fmap1, seg, image_id="y", scale_id=1)
    with pytest.raises(ValueError):
        concat_image_codebook([parts[0], other])
    with pytest.raises(ValueError):
        concat_image_codebook([parts[0], parts[0]])
