"""Scene-level quantization: pool local codebooks, cluster, remap.

The build runs per scale.  Images are split into contiguous batches; within a
batch the local codebooks of every image are pooled and clustered with
spherical k-means, and the batch centroids are concatenated into the scale's
global codebook.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import BuildError
from .feature_io import FeatureMap, SceneManifest, pca_visualize
from .quantizer_local import LocalCodebook, grouped_spherical_means, quantize_superpixel
from .superpixel import DEFAULT_COMPACTNESS, DEFAULT_ITERS, Segmentation, slic_segment
from .vqff_store import VqffStore

log = logging.getLogger(__name__)


@dataclass
class SuperpixelParams:
    n_superpixels: int = 1024
    compactness: float = DEFAULT_COMPACTNESS
    max_iters: int = DEFAULT_ITERS


@dataclass
class GlobalBuildParams:
    """Knobs of the global stage.

    ``budget_k`` caps the summed codebook size over scales.  ``None`` means
    the default ``N*M*H*W/D`` when building (and no cap in :func:`choose_k`);
    ``math.inf`` disables the cap.
    """

    alpha: float = 0.05
    budget_k: float | None = None
    num_batches: int = 1
    kmeans_max_iters: int = 20
    seed: int = 0
    weighted: bool = False
    merge_batches: bool = False

    @property
    def per_scale(self) -> bool:
        return True

    def validate(self, num_images: int | None = None) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.num_batches < 1:
            raise ValueError("num_batches must be >= 1")
        if num_images is not None and self.num_batches > num_images:
            raise ValueError(f"num_batches {self.num_batches} exceeds image count {num_images}")
        if self.kmeans_max_iters < 1:
            raise ValueError("kmeans_max_iters must be >= 1")
        if self.budget_k is not None and not self.budget_k >= 1:
            raise ValueError("budget_k must be >= 1")


@dataclass
class PooledCodebook:
    rows: np.ndarray  # (R, D)
    offsets: np.ndarray  # start row of each source codebook
    sizes: np.ndarray
    image_ids: list
    cell_sizes: np.ndarray
    scale_id: int | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def rows_of(self, which: int) -> slice:
        start = int(self.offsets[which])
        return slice(start, start + int(self.sizes[which]))


def pool_codebooks(codebooks: Sequence[LocalCodebook]) -> PooledCodebook:
    """Concatenate local codebooks of one scale, remembering where rows came from."""
    if not codebooks:
        raise ValueError("nothing to pool")
    scales = {c.scale_id for c in codebooks}
    if len(scales) > 1:
        raise ValueError(f"codebooks from mixed scales {sorted(map(str, scales))}")
    dims = {c.entries.shape[1] for c in codebooks}
    if len(dims) > 1:
        raise ValueError(f"codebooks with mixed dimensions {sorted(dims)}")
    sizes = np.array([len(c) for c in codebooks], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return PooledCodebook(
        rows=np.concatenate([c.entries for c in codebooks], axis=0),
        offsets=offsets,
        sizes=sizes,
        image_ids=[c.image_id for c in codebooks],
        cell_sizes=np.concatenate([c.cell_sizes for c in codebooks]),
        scale_id=scales.pop(),
    )


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, D) float32
    assignment: np.ndarray  # (R,) int64
    n_iter: int
    converged: bool
    distortion: list = field(default_factory=list)  # per assignment step


def _kmeanspp(points64: np.ndarray, k: int, rng: np.random.Generator, weights: np.ndarray) -> list[int]:
    """k-means++ seeding with cosine distance ``1 - <x, c>`` as the D^2 weight."""
    r = len(points64)
    chosen = [int(np.searchsorted(np.cumsum(weights), rng.random() * weights.sum(), side="right"))]
    chosen[0] = min(chosen[0], r - 1)
    mind = np.clip(1.0 - points64 @ points64[chosen[0]], 0.0, None)
    taken = np.zeros(r, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        score = weights * mind
        score[taken] = 0.0
        total = score.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(score), rng.random() * total, side="right"))
            idx = min(idx, r - 1)
            if taken[idx]:  # rounding at the top of the cumsum
                idx = int(np.flatnonzero(score > 0)[-1])
        else:
            free = np.flatnonzero(~taken)
            idx = int(free[rng.integers(len(free))])
        chosen.append(idx)
        taken[idx] = True
        mind = np.minimum(mind, np.clip(1.0 - points64 @ points64[idx], 0.0, None))
    return chosen


def spherical_kmeans(
    points: np.ndarray,
    k: int,
    seed=0,
    max_iters: int = 20,
    weights: np.ndarray | None = None,
) -> KMeansResult:
    """Cluster unit vectors by cosine similarity.

    Centroids are spherical means of their members and every point goes to
    its highest-dot-product centroid (lowest index on ties).  Empty clusters
    are reseeded with the points farthest from their centroids.  Stops when
    the assignment no longer changes or after ``max_iters`` updates.
    """
    points = np.asarray(points)
    r = len(points)
    if not 1 <= k <= r:
        raise ValueError(f"k must be in [1, {r}], got {k}")
    if k == r:
        return KMeansResult(
            centroids=np.array(points, dtype=np.float32),
            assignment=np.arange(r, dtype=np.int64),
            n_iter=0,
            converged=True,
            distortion=[0.0],
        )
    p64 = points.astype(np.float64)
    w = np.ones(r) if weights is None else np.asarray(weights, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centroids = points[_kmeanspp(p64, k, rng, w)].astype(np.float32)

    assignment = None
    history = []
    converged = False
    n_iter = 0
    rows = np.arange(r)
    for _ in range(max_iters):
        sims = p64 @ centroids.astype(np.float64).T
        new = np.argmax(sims, axis=1)
        history.append(float((w * (1.0 - sims[rows, new])).sum()))
        if assignment is not None and np.array_equal(new, assignment):
            converged = True
            break
        assignment = new
        n_iter += 1
        centroids, counts, _ = grouped_spherical_means(points, assignment, k, weights)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            own = np.einsum("ij,ij->i", p64, centroids[assignment].astype(np.float64))
            far = np.argsort(own, kind="stable")[: len(empty)]
            centroids[empty] = points[far]
    if not converged:
        sims = p64 @ centroids.astype(np.float64).T
        assignment = np.argmax(sims, axis=1)
        history.append(float((w * (1.0 - sims[rows, assignment])).sum()))
    return KMeansResult(
        centroids=np.ascontiguousarray(centroids, dtype=np.float32),
        assignment=assignment.astype(np.int64),
        n_iter=n_iter,
        converged=converged,
        distortion=history,
    )


def choose_k(pooled_size: int, params: GlobalBuildParams, scale_share: float = 1.0) -> int:
    """``min(ceil(alpha * R), ceil(scale_share * budget))`` clamped to ``[1, R]``."""
    if pooled_size < 1:
        raise ValueError("pooled_size must be >= 1")
    # Shave float noise so that e.g. 0.1 * 1000 stays 100.
    k = math.ceil(params.alpha * pooled_size - 1e-9)
    if params.budget_k is not None and math.isfinite(params.budget_k):
        k = min(k, math.ceil(scale_share * params.budget_k - 1e-9))
    return int(min(max(k, 1), pooled_size))


def remap_indices(local_map: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Pointwise ``table[local_map]``; a local index without an entry is a bug."""
    table = np.asarray(table)
    if local_map.size and int(local_map.max()) >= len(table):
        raise RuntimeError(
            f"local index {int(local_map.max())} has no table entry (table size {len(table)})"
        )
    if len(table) and table.min() < 0:
        raise RuntimeError("remap table contains unfilled entries")
    return table[local_map].astype(np.uint32)


def split_batches(num_images: int, num_batches: int) -> list[np.ndarray]:
    """Contiguous, near-equal batches in sequence order."""
    return [b for b in np.array_split(np.arange(num_images), num_batches) if len(b)]


def default_budget(n: int, m: int, h: int, w: int, d: int) -> float:
    return n * m * h * w / d


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class _LocalResult:
    segmentation: Segmentation
    books: list  # per scale LocalCodebook
    maps: list  # per scale (H, W) uint32
    shape: tuple


def _segment_image(image_id, rgb_loader, first_map: FeatureMap, sp: SuperpixelParams) -> Segmentation:
    rgb = rgb_loader(image_id) if rgb_loader is not None else None
    if rgb is None:
        rgb = pca_visualize(first_map)
    n = min(sp.n_superpixels, first_map.height * first_map.width)
    return slic_segment(rgb, n, sp.compactness, sp.max_iters)


def _local_stage(image_id, scale_ids, feature_loader, rgb_loader, sp) -> _LocalResult:
    maps = []
    for s in scale_ids:
        try:
            maps.append(feature_loader(image_id, s))
        except Exception as exc:  # surfaced with context below
            raise BuildError(f"cannot read features for image {image_id!r} scale {s}: {exc}") from exc
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise BuildError(f"image {image_id!r}: feature maps disagree in shape {sorted(shapes)}")
    seg = _segment_image(image_id, rgb_loader, maps[0], sp)
    books, imaps = [], []
    for s, fmap in zip(scale_ids, maps):
        book, imap = quantize_superpixel(fmap, seg, image_id=image_id, scale_id=s)
        books.append(book)
        imaps.append(imap)
    return _LocalResult(seg, books, imaps, maps[0].shape)


def _cluster_batch(pooled: PooledCodebook, k: int, seed, params: GlobalBuildParams) -> KMeansResult:
    weights = pooled.cell_sizes if params.weighted else None
    return spherical_kmeans(pooled.rows, k, seed=seed, max_iters=params.kmeans_max_iters, weights=weights)


def build_vqff(
    manifest: SceneManifest,
    superpixel: SuperpixelParams | None = None,
    params: GlobalBuildParams | None = None,
    *,
    feature_loader: Callable[[str, int], FeatureMap] | None = None,
    rgb_loader: Callable[[str], np.ndarray | None] | None = None,
    threads: int = 1,
) -> VqffStore:
    """Quantize every feature map of a scene into a :class:`VqffStore`.

    Loaders default to reading the files named in ``manifest``.  Images
    without RGB are segmented on a PCA false-color render of their first
    scale.  ``threads`` parallelizes the per-image and per-batch stages; the
    output does not depend on it.
    """
    sp = superpixel or SuperpixelParams()
    params = params or GlobalBuildParams()
    n, m = manifest.num_images, manifest.num_scales
    if n == 0 or m == 0:
        raise BuildError("scene has no images or no scales")
    try:
        params.validate(n)
    except ValueError as exc:
        raise BuildError(str(exc)) from exc
    feature_loader = feature_loader or manifest.feature_loader()
    if rgb_loader is None:
        rgb_loader = manifest.rgb_loader()
    scale_ids = manifest.scale_ids
    image_ids = manifest.image_ids

    def run(fn, items):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    local = run(lambda im: _local_stage(im, scale_ids, feature_loader, rgb_loader, sp), image_ids)
    shapes = {res.shape for res in local}
    if len(shapes) > 1:
        raise BuildError(f"feature maps disagree in shape across images: {sorted(shapes)}")
    h, w, d = shapes.pop()
    log.info("local stage done: %d images x %d scales", n, m)

    resolved = params
    if params.budget_k is None:
        resolved = replace(params, budget_k=default_budget(n, m, h, w, d))
    batches = split_batches(n, params.num_batches)

    jobs = []
    for j, s in enumerate(scale_ids):
        for b, members in enumerate(batches):
            pooled = pool_codebooks([local[i].books[j] for i in members])
            share = (1.0 / m) * (len(members) / n)
            k = choose_k(len(pooled), resolved, share)
            jobs.append((j, b, members, pooled, k))
    results = run(lambda job: _cluster_batch(job[3], job[4], [params.seed, job[0], job[1]], params), jobs)

    codebooks = []
    index_maps = np.empty((n, m, h, w), dtype=np.uint32)
    for j, s in enumerate(scale_ids):
        scale_jobs = [(job, res) for job, res in zip(jobs, results) if job[0] == j]
        parts, offset = [], 0
        row_tables = []
        for (_, _, members, pooled, _), res in scale_jobs:
            parts.append(res.centroids)
            row_tables.append((members, pooled, res.assignment + offset))
            offset += len(res.centroids)
        book = np.concatenate(parts, axis=0)
        merge_map = None
        if params.merge_batches and len(parts) > 1:
            k_merge = min(choose_k(sum(len(p) for _, p, _ in row_tables), resolved, 1.0 / m), len(book))
            merged = spherical_kmeans(
                book, k_merge, seed=[params.seed, j, len(batches)], max_iters=params.kmeans_max_iters
            )
            book, merge_map = merged.centroids, merged.assignment
        for members, pooled, global_rows in row_tables:
            if merge_map is not None:
                global_rows = merge_map[global_rows]
            for slot, i in enumerate(members):
                table = global_rows[pooled.rows_of(slot)]
                index_maps[i, j] = remap_indices(local[i].maps[j], table)
        codebooks.append(book)
        log.info("scale %s: K=%d from %d pooled rows", s, len(book), sum(len(p) for _, p, _ in row_tables))

    record = {
        "superpixel": asdict(sp),
        "global": {k: v for k, v in asdict(params).items()},
        "budget_k_resolved": resolved.budget_k,
        "batches": [[int(x) for x in b] for b in batches],
    }
    store = VqffStore(
        image_ids=image_ids,
        scale_ids=scale_ids,
        codebooks=codebooks,
        index_maps=index_maps,
        params=record,
        seed=params.seed,
    )
    store.validate()
    return store


def build_from_scene(scene, superpixel=None, params=None, *, use_rgb: bool = True, threads: int = 1):
    """Convenience wrapper for an in-memory :class:`~vqff.feature_io.SyntheticScene`."""
    return build_vqff(
        scene.manifest,
        superpixel,
        params,
        feature_loader=scene.load_features,
        rgb_loader=scene.load_rgb if use_rgb else (lambda _id: None),
        threads=threads,
    )
