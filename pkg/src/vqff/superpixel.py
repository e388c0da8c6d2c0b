"""SLIC superpixels in CIELAB space with connectivity enforcement.

Segmentations persist as ``VQFS`` files::

    b"VQFS" | version u32 | H u32 | W u32 | num_segments u32 | H*W u32 labels
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab
from skimage.measure import label as connected_components

from .errors import FormatError

VQFS_MAGIC = b"VQFS"
VQFS_VERSION = 1
_VQFS_HEADER = struct.Struct("<4sIIII")

DEFAULT_COMPACTNESS = 10.0
DEFAULT_ITERS = 10


@dataclass
class Segmentation:
    labels: np.ndarray  # (H, W) int32 in [0, num_segments)
    num_segments: int
    compactness: float = DEFAULT_COMPACTNESS
    requested: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def validate(self) -> None:
        lab = self.labels
        if lab.ndim != 2:
            raise ValueError("labels must be 2-D")
        if lab.min() < 0 or lab.max() >= self.num_segments:
            raise ValueError("label out of range")
        if np.count_nonzero(np.bincount(lab.ravel(), minlength=self.num_segments)) != self.num_segments:
            raise ValueError("unused label")


def _to_lab(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    if image.dtype == np.uint8:
        rgb = image.astype(np.float64) / 255.0
    else:
        rgb = np.clip(image.astype(np.float64), 0.0, 1.0)
    return rgb2lab(rgb)


def _lab_gradient(lab: np.ndarray) -> np.ndarray:
    padded = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    dx = padded[1:-1, 2:] - padded[1:-1, :-2]
    return (dy**2).sum(-1) + (dx**2).sum(-1)


def _grid_seeds(h: int, w: int, step: float) -> tuple[np.ndarray, np.ndarray, int, int]:
    ny = int(min(h, max(1, round(h / step))))
    nx = int(min(w, max(1, round(w / step))))
    rows = np.floor((np.arange(ny) + 0.5) * h / ny).astype(np.int64)
    cols = np.floor((np.arange(nx) + 0.5) * w / nx).astype(np.int64)
    sy, sx = np.meshgrid(rows, cols, indexing="ij")
    return sy.ravel(), sx.ravel(), ny, nx


def _perturb_seeds(sy, sx, grad):
    h, w = grad.shape
    # Center first so that ties keep the seed where it is.
    offsets = [(0, 0)] + [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    cand_y = np.stack([sy + dy for dy, _ in offsets], axis=1)
    cand_x = np.stack([sx + dx for _, dx in offsets], axis=1)
    inside = (cand_y >= 0) & (cand_y < h) & (cand_x >= 0) & (cand_x < w)
    g = np.where(inside, grad[np.clip(cand_y, 0, h - 1), np.clip(cand_x, 0, w - 1)], np.inf)
    pick = np.argmin(g, axis=1)
    k = np.arange(len(sy))
    return cand_y[k, pick], cand_x[k, pick]


def _assign(lab_flat, centers, h, w, half, spatial_weight, labels):
    """One SLIC assignment pass; pixels outside every window keep their label."""
    k = len(centers)
    cy = np.rint(centers[:, 0]).astype(np.int64)
    cx = np.rint(centers[:, 1]).astype(np.int64)
    off = np.arange(-half, half + 1)
    py = (cy[:, None, None] + off[None, :, None]).repeat(len(off), axis=2)
    px = (cx[:, None, None] + off[None, None, :]).repeat(len(off), axis=1)
    kid = np.broadcast_to(np.arange(k)[:, None, None], py.shape)
    ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
    py, px, kid = py[ok], px[ok], kid[ok]
    pix = py * w + px
    dlab = np.sqrt(((lab_flat[pix] - centers[kid, 2:]) ** 2).sum(axis=1))
    dxy = np.sqrt((py - centers[kid, 0]) ** 2 + (px - centers[kid, 1]) ** 2)
    dist = dlab + spatial_weight * dxy
    order = np.lexsort((kid, dist, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    out = labels.copy()
    out[pix_sorted[first]] = kid[order][first]
    return out


def _update_centers(lab_flat, labels, centers, w):
    k = len(centers)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    nonempty = counts > 0
    idx = np.arange(len(labels))
    feats = [idx // w, idx % w, lab_flat[:, 0], lab_flat[:, 1], lab_flat[:, 2]]
    new = centers.copy()
    for j, f in enumerate(feats):
        sums = np.bincount(labels, weights=f, minlength=k)
        new[nonempty, j] = sums[nonempty] / counts[nonempty]
    return new


def _neighbor_pairs(comp: np.ndarray) -> np.ndarray:
    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    diff = a != b
    pairs = np.stack([np.concatenate([a[diff], b[diff]]), np.concatenate([b[diff], a[diff]])], axis=1)
    return np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)


def enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Make every label 4-connected and relabel to ``0..n-1`` in raster order.

    The largest component of each label keeps it; every other component is
    merged into the adjacent segment that is currently largest (ties go to the
    lower label).
    """
    comp = connected_components(labels + 1, connectivity=1, background=0)
    ncomp = int(comp.max())
    comp_label = np.zeros(ncomp + 1, dtype=np.int64)
    comp_label[comp.ravel()] = labels.ravel()
    comp_size = np.bincount(comp.ravel(), minlength=ncomp + 1)

    # The largest component of each label is its main body; ties keep the
    # component seen first in raster order (lowest component id).
    order = np.lexsort((np.arange(1, ncomp + 1), -comp_size[1:], comp_label[1:])) + 1
    settled = np.zeros(ncomp + 1, dtype=bool)
    seen = set()
    for c in order:
        if comp_label[c] not in seen:
            seen.add(int(comp_label[c]))
            settled[c] = True
    orphans = [int(c) for c in range(1, ncomp + 1) if not settled[c]]

    if orphans:
        seg_size = np.zeros(labels.max() + 1, dtype=np.int64)
        for c in range(1, ncomp + 1):
            if settled[c]:
                seg_size[comp_label[c]] += comp_size[c]
        neighbors: dict[int, list[int]] = {}
        for a, b in _neighbor_pairs(comp):
            neighbors.setdefault(int(a), []).append(int(b))
        pending = orphans
        while pending:
            still = []
            for c in pending:
                cand = [n for n in neighbors.get(c, []) if settled[n]]
                if not cand:
                    still.append(c)
                    continue
                best = min(cand, key=lambda n: (-seg_size[comp_label[n]], comp_label[n]))
                comp_label[c] = comp_label[best]
                seg_size[comp_label[c]] += comp_size[c]
                settled[c] = True
            if len(still) == len(pending):
                raise RuntimeError("connectivity enforcement made no progress")
            pending = still

    merged = comp_label[comp]
    return relabel_raster(merged)


def relabel_raster(labels: np.ndarray) -> np.ndarray:
    """Renumber labels consecutively in order of first raster occurrence."""
    uniq, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    return rank[inverse].reshape(labels.shape).astype(np.int32)


def slic_segment(
    image: np.ndarray,
    n_superpixels: int,
    compactness: float = DEFAULT_COMPACTNESS,
    max_iters: int = DEFAULT_ITERS,
) -> Segmentation:
    """Partition an RGB image into roughly ``n_superpixels`` superpixels.

    Classic SLIC: seeds on a regular grid with spacing
    ``g = sqrt(H*W / n_superpixels)`` (moved to the lowest-gradient pixel of
    their 3x3 neighborhood), assignment within a window of half-width ``g``
    around each center using ``d = d_lab + (compactness / g) * d_xy``, center
    update, then connectivity enforcement.  Fully deterministic.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if not 1 <= n_superpixels <= h * w:
        raise ValueError(f"n_superpixels must be in [1, {h * w}], got {n_superpixels}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if compactness < 0:
        raise ValueError("compactness must be >= 0")

    lab = _to_lab(image)
    lab_flat = lab.reshape(-1, 3)
    step = math.sqrt(h * w / n_superpixels)
    sy, sx, ny, nx = _grid_seeds(h, w, step)
    # Below step 3 the 3x3 move could land two seeds on the same pixel.
    if step >= 3:
        sy, sx = _perturb_seeds(sy, sx, _lab_gradient(lab))
    centers = np.column_stack([sy, sx, lab[sy, sx]]).astype(np.float64)

    rows, cols = np.mgrid[0:h, 0:w]
    cell = (np.minimum(rows * ny // h, ny - 1) * nx + np.minimum(cols * nx // w, nx - 1)).ravel()
    labels = cell.astype(np.int64)

    half = max(1, math.ceil(step))
    spatial_weight = compactness / step
    for _ in range(max_iters):
        new = _assign(lab_flat, centers, h, w, half, spatial_weight, labels)
        changed = not np.array_equal(new, labels)
        labels = new
        centers = _update_centers(lab_flat, labels, centers, w)
        if not changed:
            break

    final = enforce_connectivity(labels.reshape(h, w))
    return Segmentation(
        labels=final,
        num_segments=int(final.max()) + 1,
        compactness=float(compactness),
        requested=int(n_superpixels),
    )


def segment_stats(seg: Segmentation) -> dict:
    """Per-segment pixel counts and the number of pixels on a segment boundary."""
    lab = seg.labels
    sizes = np.bincount(lab.ravel(), minlength=seg.num_segments)
    return {"sizes": sizes, "boundary_pixels": int(boundary_mask(lab).sum())}


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbor carrying a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def boundary_recall(truth: np.ndarray, labels: np.ndarray, tolerance: float = 2.0) -> float:
    """Fraction of ``truth`` boundary pixels within ``tolerance`` of a ``labels`` boundary."""
    tb = boundary_mask(truth)
    if not tb.any():
        return 1.0
    sb = boundary_mask(labels)
    if not sb.any():
        return 0.0
    dist = ndimage.distance_transform_edt(~sb)
    return float((dist[tb] <= tolerance).mean())


# ---------------------------------------------------------------------------
# VQFS files
# ---------------------------------------------------------------------------


def save_segmentation(path, seg: Segmentation) -> None:
    h, w = seg.shape
    header = _VQFS_HEADER.pack(VQFS_MAGIC, VQFS_VERSION, h, w, seg.num_segments)
    Path(path).write_bytes(header + np.ascontiguousarray(seg.labels, dtype="<u4").tobytes())


def load_segmentation(path) -> Segmentation:
    buf = Path(path).read_bytes()
    if len(buf) < _VQFS_HEADER.size:
        raise FormatError("truncated VQFS header", path=path, offset=len(buf))
    magic, version, h, w, n = _VQFS_HEADER.unpack_from(buf, 0)
    if magic != VQFS_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path=path, offset=0)
    if version != VQFS_VERSION:
        raise FormatError(f"unsupported VQFS version {version}", path=path, offset=4)
    start = _VQFS_HEADER.size
    if len(buf) != start + 4 * h * w:
        raise FormatError("payload size mismatch", path=path, offset=start)
    labels = np.frombuffer(buf, dtype="<u4", offset=start).reshape(h, w).astype(np.int32)
    seg = Segmentation(labels=labels, num_segments=int(n))
    try:
        seg.validate()
    except ValueError as exc:
        raise FormatError(str(exc), path=path, offset=start) from exc
    return seg
