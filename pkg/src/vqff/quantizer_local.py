"""Per-image, per-scale quantization into superpixel or patch cells."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .feature_io import FeatureMap, unit_rows
from .superpixel import Segmentation

# Below this sum norm the members cancel out and the mean direction is undefined.
CANCEL_EPS = 1e-8


@dataclass
class LocalCodebook:
    entries: np.ndarray  # (K, D) float32 unit rows
    cell_sizes: np.ndarray  # (K,) pixel count per entry
    image_id: str | None = None
    scale_id: int | None = None
    degenerate: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.entries)


def spherical_mean(vectors, *, with_flag: bool = False):
    """Normalized sum of unit vectors, the minimizer of mean cosine distance.

    If the vectors cancel (sum norm below 1e-8) the first vector is returned
    instead; ``with_flag=True`` also returns whether that happened.
    """
    v = np.asarray(vectors)
    if v.ndim == 1:
        v = v[None, :]
    if len(v) == 0:
        raise ValueError("spherical_mean of an empty set")
    means, _, degenerate = grouped_spherical_means(v, np.zeros(len(v), dtype=np.int64), 1)
    return (means[0], bool(degenerate[0])) if with_flag else means[0]


def grouped_spherical_means(
    vectors: np.ndarray, groups: np.ndarray, num_groups: int, weights: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spherical mean of each group of rows.

    Sums are accumulated in float64 in a fixed order (stable sort by group,
    then contiguous reduction), so the result never depends on scheduling.
    A group with a single member returns that member bit-for-bit.

    Returns ``(means, counts, degenerate)``; empty groups get a zero row.
    """
    vectors = np.asarray(vectors)
    groups = np.asarray(groups, dtype=np.int64)
    d = vectors.shape[1]
    order = np.argsort(groups, kind="stable")
    sorted_groups = groups[order]
    v64 = vectors[order].astype(np.float64)
    if weights is not None:
        v64 *= np.asarray(weights, dtype=np.float64)[order, None]
    counts = np.bincount(groups, minlength=num_groups)
    present = np.flatnonzero(counts)
    starts = np.searchsorted(sorted_groups, present)
    sums = np.zeros((num_groups, d))
    if len(present):
        sums[present] = np.add.reduceat(v64, starts, axis=0)
    norms = np.linalg.norm(sums, axis=1)
    degenerate = (counts > 0) & (norms < CANCEL_EPS)
    means, _ = unit_rows(sums, eps=CANCEL_EPS)
    means[counts == 0] = 0.0

    first = np.full(num_groups, -1, dtype=np.int64)
    first[present] = order[starts]
    single = counts == 1
    if vectors.dtype == np.float32:
        means[single] = vectors[first[single]]
    if degenerate.any():
        means[degenerate] = vectors[first[degenerate]]
    return means, counts, degenerate


def _quantize_cells(fmap: FeatureMap, cells: np.ndarray, num_cells: int):
    means, counts, degenerate = grouped_spherical_means(fmap.vectors(), cells.ravel(), num_cells)
    used = counts > 0
    remap = np.full(num_cells, -1, dtype=np.int64)
    remap[used] = np.arange(int(used.sum()))
    index_map = remap[cells].astype(np.uint32)
    book = LocalCodebook(entries=means[used], cell_sizes=counts[used], degenerate=degenerate[used])
    return book, index_map


def quantize_superpixel(fmap: FeatureMap, seg: Segmentation, *, image_id=None, scale_id=None):
    """Collapse every superpixel to the spherical mean of its features.

    Returns ``(LocalCodebook, index_map)`` with ``index_map`` an (H, W) uint32
    array of entry indices.
    """
    if seg.labels.shape != (fmap.height, fmap.width):
        raise ValueError(
            f"segmentation {seg.labels.shape} does not match feature map {fmap.shape[:2]}"
        )
    book, index_map = _quantize_cells(fmap, seg.labels, seg.num_segments)
    book.image_id, book.scale_id = image_id, scale_id
    return book, index_map


def patch_cells(height: int, width: int, patch_size: int) -> tuple[np.ndarray, int]:
    """Axis-aligned tiling; edge tiles are smaller.  Returns (cell ids, count)."""
    rows = np.arange(height) // patch_size
    cols = np.arange(width) // patch_size
    ncols = -(-width // patch_size)
    nrows = -(-height // patch_size)
    return rows[:, None] * ncols + cols[None, :], nrows * ncols


def quantize_patch(fmap: FeatureMap, patch_size: int, *, image_id=None, scale_id=None):
    """Baseline: spherical mean over square ``patch_size`` tiles."""
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    if patch_size > min(fmap.height, fmap.width):
        raise ValueError(f"patch_size {patch_size} exceeds min(H, W)")
    cells, count = patch_cells(fmap.height, fmap.width, patch_size)
    book, index_map = _quantize_cells(fmap, cells, count)
    book.image_id, book.scale_id = image_id, scale_id
    return book, index_map


def reconstruct_local(book: LocalCodebook, index_map: np.ndarray) -> FeatureMap:
    return FeatureMap(book.entries[index_map])


def concat_image_codebook(per_scale):
    """Concatenate one image's per-scale codebooks in the given order.

    ``per_scale`` is a sequence of ``(LocalCodebook, index_map)``.  Returns the
    stacked ``(K_total, D)`` entries and the index maps shifted by each
    scale's offset.
    """
    per_scale = list(per_scale)
    if not per_scale:
        raise ValueError("no codebooks to concatenate")
    ids = {book.image_id for book, _ in per_scale}
    if len(ids) > 1:
        raise ValueError(f"codebooks come from different images: {sorted(map(str, ids))}")
    scales = [book.scale_id for book, _ in per_scale]
    if None not in scales and len(set(scales)) != len(scales):
        raise ValueError("scales must be disjoint")
    offset = 0
    maps = []
    for book, index_map in per_scale:
        maps.append(index_map.astype(np.uint32) + np.uint32(offset))
        offset += len(book)
    entries = np.concatenate([book.entries for book, _ in per_scale], axis=0)
    return entries, maps
