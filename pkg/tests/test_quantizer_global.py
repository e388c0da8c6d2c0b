import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_unit
from vqff.errors import BuildError
from vqff.feature_io import FeatureMap, SyntheticSceneSpec, generate_synthetic_scene
from vqff.quantizer_global import (
    GlobalBuildParams,
    SuperpixelParams,
    build_from_scene,
    build_vqff,
    choose_k,
    pool_codebooks,
    remap_indices,
    spherical_kmeans,
    split_batches,
)
from vqff.quantizer_local import LocalCodebook, quantize_superpixel, reconstruct_local, spherical_mean
from vqff.superpixel import slic_segment
from vqff.vqff_store import cosine_fidelity, reconstruct_feature_map, save_store


def book(rng, k, d=4, image_id="a", scale_id=0):
    return LocalCodebook(random_unit(rng, (k, d)), np.ones(k, dtype=np.int64), image_id, scale_id)


def test_pool_identity_and_offsets(rng):
    a, b = book(rng, 3), book(rng, 4, image_id="b")
    one = pool_codebooks([a])
    assert np.array_equal(one.rows, a.entries) and list(one.offsets) == [0]
    pooled = pool_codebooks([a, b])
    assert len(pooled) == 7 and list(pooled.offsets) == [0, 3]
    assert np.array_equal(pooled.rows[pooled.rows_of(1)], b.entries)


def test_pool_rejects_mixed_scales(rng):
    with pytest.raises(ValueError):
        pool_codebooks([book(rng, 2, scale_id=0), book(rng, 2, scale_id=1)])


def test_kmeans_saturation(rng):
    pts = random_unit(rng, (12, 5))
    res = spherical_kmeans(pts, 12, seed=1)
    assert np.array_equal(res.centroids, pts)
    assert np.array_equal(res.assignment, np.arange(12))
    assert res.distortion[-1] == 0.0


def test_kmeans_single_cluster_is_spherical_mean(rng):
    pts = random_unit(rng, (30, 6))
    res = spherical_kmeans(pts, 1, seed=0)
    assert np.allclose(res.centroids[0], spherical_mean(pts), atol=1e-7)
    assert not res.assignment.any()


@given(st.integers(0, 2**32 - 1))
def test_kmeans_recovers_two_bundles(seed):
    rng = np.random.default_rng(seed)
    centers = random_unit(rng, (2, 8)).astype(np.float64)
    while centers[0] @ centers[1] > 0.5:
        centers = random_unit(rng, (2, 8)).astype(np.float64)
    pts = np.concatenate([c + 0.05 * rng.standard_normal((50, 8)) for c in centers])
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    res = spherical_kmeans(pts.astype(np.float32), 2, seed=seed)
    truth = np.repeat([0, 1], 50)
    assert np.array_equal(res.assignment, truth) or np.array_equal(res.assignment, 1 - truth)


def test_kmeans_rejects_bad_k(rng):
    pts = random_unit(rng, (5, 3))
    for k in (0, 6):
        with pytest.raises(ValueError):
            spherical_kmeans(pts, k)


@given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.integers(1, 20), st.booleans())
def test_kmeans_properties(seed, r, k, weighted):
    k = min(k, r)
    rng = np.random.default_rng(seed)
    pts = random_unit(rng, (r, 4))
    w = rng.integers(1, 20, r) if weighted else None
    res = spherical_kmeans(pts, k, seed=seed, max_iters=15, weights=w)
    norms = np.linalg.norm(res.centroids.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1) <= 1e-4)
    sims = pts.astype(np.float64) @ res.centroids.astype(np.float64).T
    assert np.all(sims[np.arange(r), res.assignment] >= sims.max(axis=1) - 1e-12)
    hist = np.array(res.distortion)
    assert np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0]))
    again = spherical_kmeans(pts, k, seed=seed, max_iters=15, weights=w)
    assert np.array_equal(again.assignment, res.assignment)
    assert again.centroids.tobytes() == res.centroids.tobytes()


def test_choose_k_examples():
    assert choose_k(137, GlobalBuildParams(alpha=1.0)) == 137
    assert choose_k(1000, GlobalBuildParams(alpha=0.1, budget_k=math.inf)) == 100
    assert choose_k(1000, GlobalBuildParams(alpha=1.0, budget_k=100), scale_share=0.5) == 50
    assert choose_k(3, GlobalBuildParams(alpha=0.01)) == 1


@given(st.integers(1, 10**6), st.floats(0.001, 1.0), st.floats(1, 1e7), st.floats(0.01, 1.0))
def test_choose_k_formula(r, alpha, budget, share):
    k = choose_k(r, GlobalBuildParams(alpha=alpha, budget_k=budget), share)
    assert 1 <= k <= r
    assert k <= max(1, math.ceil(alpha * r)) and k <= max(1, math.ceil(share * budget))


def test_remap_examples(rng):
    local = rng.integers(0, 6, (5, 4)).astype(np.uint32)
    assert np.array_equal(remap_indices(local, np.arange(6)), local)
    assert not remap_indices(local, np.zeros(6, dtype=np.int64)).any()
    table = rng.integers(0, 100, 6)
    out = remap_indices(local, table)
    for r in range(5):
        for c in range(4):
            assert out[r, c] == table[local[r, c]]
    with pytest.raises(RuntimeError):
        remap_indices(local, np.arange(int(local.max())))


def test_split_batches_contiguous():
    parts = split_batches(10, 3)
    assert [list(p) for p in parts] == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]]


def test_single_image_full_alpha_reproduces_local(small_scene):
    scene = generate_synthetic_scene(SyntheticSceneSpec(num_images=1, num_scales=1, height=32, width=32, dim=8, noise_sigma=0.1, seed=2))
    sp = SuperpixelParams(n_superpixels=64)
    store = build_from_scene(scene, sp, GlobalBuildParams(alpha=1.0, budget_k=math.inf))
    image_id = scene.manifest.image_ids[0]
    seg = slic_segment(scene.rgb[image_id], 64)
    local = reconstruct_local(*quantize_superpixel(scene.features[(image_id, 0)], seg))
    assert reconstruct_feature_map(store, image_id, 0).data.tobytes() == local.data.tobytes()


def test_noiseless_scene_high_fidelity_then_budget(clean_scene):
    sp = SuperpixelParams(n_superpixels=256)
    for params in (GlobalBuildParams(alpha=1.0, budget_k=math.inf), GlobalBuildParams(alpha=1.0, budget_k=16)):
        store = build_from_scene(clean_scene, sp, params)
        if params.budget_k == 16:
            assert store.codebook_sizes == [8, 8]
        for i, image_id in enumerate(clean_scene.manifest.image_ids):
            for s in store.scale_ids:
                recon = reconstruct_feature_map(store, image_id, s)
                assert cosine_fidelity(clean_scene.clean_map(i), recon) >= 0.999


def test_codebook_never_exceeds_pooled(small_scene):
    store = build_from_scene(small_scene, SuperpixelParams(64), GlobalBuildParams(alpha=1.0, budget_k=math.inf, num_batches=2))
    n = small_scene.manifest.num_images
    for k in store.codebook_sizes:
        assert k <= n * 64 * 2


def test_single_batch_equals_unbatched_definition(small_scene):
    sp = SuperpixelParams(64)
    params = GlobalBuildParams(alpha=0.3, seed=5)
    store = build_from_scene(small_scene, sp, params)
    h = w = 48
    budget = small_scene.manifest.num_images * 2 * h * w / 16
    for j, s in enumerate(small_scene.manifest.scale_ids):
        books = []
        for image_id in small_scene.manifest.image_ids:
            seg = slic_segment(small_scene.rgb[image_id], 64)
            books.append(quantize_superpixel(small_scene.features[(image_id, s)], seg, image_id=image_id, scale_id=s)[0])
        pooled = pool_codebooks(books)
        k = choose_k(len(pooled), GlobalBuildParams(alpha=0.3, budget_k=budget), 0.5)
        ref = spherical_kmeans(pooled.rows, k, seed=[5, j, 0], max_iters=params.kmeans_max_iters)
        assert store.codebooks[j].tobytes() == ref.centroids.tobytes()


def test_build_deterministic_across_runs_and_threads(tmp_path, small_scene):
    sp = SuperpixelParams(64)
    params = GlobalBuildParams(alpha=0.2, num_batches=2, seed=9)
    dirs = []
    for run, threads in enumerate((1, 4, 1)):
        d = tmp_path / f"s{run}"
        save_store(build_from_scene(small_scene, sp, params, threads=threads), d)
        dirs.append(d)
    names = sorted(p.name for p in dirs[0].iterdir())
    for d in dirs[1:]:
        assert sorted(p.name for p in d.iterdir()) == names
        for name in names:
            assert (d / name).read_bytes() == (dirs[0] / name).read_bytes()


def test_batches_and_merge(small_scene):
    sp = SuperpixelParams(64)
    batched = build_from_scene(small_scene, sp, GlobalBuildParams(alpha=0.25, num_batches=2))
    merged = build_from_scene(small_scene, sp, GlobalBuildParams(alpha=0.25, num_batches=2, merge_batches=True))
    for kb, km in zip(batched.codebook_sizes, merged.codebook_sizes):
        assert km <= kb
    merged.validate()


def test_pca_fallback_without_rgb(small_scene):
    store = build_from_scene(small_scene, SuperpixelParams(64), GlobalBuildParams(alpha=0.5), use_rgb=False)
    store.validate()


def test_build_errors(small_scene):
    with pytest.raises(BuildError):
        build_from_scene(small_scene, SuperpixelParams(64), GlobalBuildParams(num_batches=5))

    def broken(image_id, scale_id):
        if image_id == small_scene.manifest.image_ids[2]:
            raise OSError("disk on fire")
        return small_scene.load_features(image_id, scale_id)

    with pytest.raises(BuildError, match="img0002"):
        build_vqff(small_scene.manifest, SuperpixelParams(64), feature_loader=broken, rgb_loader=small_scene.load_rgb)

    def mismatched(image_id, scale_id):
        fmap = small_scene.load_features(image_id, scale_id)
        return FeatureMap(fmap.data[:, :, :8].copy()) if image_id == small_scene.manifest.image_ids[1] else fmap

    with pytest.raises(BuildError):
        build_vqff(small_scene.manifest, SuperpixelParams(64), feature_loader=mismatched, rgb_loader=small_scene.load_rgb)
