"""Relevancy queries against a store: score the codebook once, broadcast by index.

The relevancy of a feature ``f`` for query ``q`` against canonical phrases
``c_1..c_n`` is

    min_i  exp(f.q) / (exp(f.c_i) + exp(f.q))  =  min_i sigmoid(f.q - f.c_i)

Query files (``VQFQ``)::

    b"VQFQ" | version u32 | D u32 | C u32 |
    (label_len u32 | label utf-8 | D f32) x (1 + C)

The first record is the query; the remaining ``C`` are canonical phrases.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .feature_io import FeatureMap
from .vqff_store import VqffStore, reconstruct_feature_map

CANONICAL_PHRASES = ("object", "things", "stuff", "texture")
DEFAULT_TAU = 0.5
VQFQ_MAGIC = b"VQFQ"
VQFQ_VERSION = 1
_VQFQ_HEADER = struct.Struct("<4sIII")
_CHUNK = 16384


@dataclass
class QueryContext:
    query: np.ndarray  # (D,)
    canonicals: np.ndarray  # (C, D)
    phrases: list[str] = field(default_factory=lambda: list(CANONICAL_PHRASES))
    threshold: float = DEFAULT_TAU
    label: str = "query"

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float32).ravel()
        self.canonicals = np.atleast_2d(np.asarray(self.canonicals, dtype=np.float32))
        if len(self.canonicals) < 1:
            raise ValueError("at least one canonical embedding is required")
        if self.canonicals.shape[1] != len(self.query):
            raise ValueError("query and canonical dimensions differ")
        if len(self.phrases) != len(self.canonicals):
            self.phrases = [f"canon{i}" for i in range(len(self.canonicals))]
        norms = np.linalg.norm(np.vstack([self.query, self.canonicals]).astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError("query and canonical embeddings must be unit norm")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")

    @property
    def dim(self) -> int:
        return len(self.query)


@dataclass
class RelevancyMap:
    values: np.ndarray  # (H, W) float64 in (0, 1)
    image_id: str
    scale_id: int | None = None  # None for the multiscale max


@dataclass
class Mask:
    bits: np.ndarray  # (H, W) bool
    image_id: str = ""

    @property
    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def area_fraction(self) -> float:
        return self.pixel_count / self.bits.size


def relevancy_score(feature: np.ndarray, ctx: QueryContext) -> float:
    feature = np.asarray(feature, dtype=np.float64).ravel()
    if len(feature) != ctx.dim:
        raise ValueError(f"feature has dimension {len(feature)}, query has {ctx.dim}")
    return float(codebook_relevancy(feature[None, :], ctx)[0])


def codebook_relevancy(codebook: np.ndarray, ctx: QueryContext) -> np.ndarray:
    """Relevancy of every codebook row: K * (C + 1) dot products."""
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.shape[1] != ctx.dim:
        raise ValueError(f"codebook has dimension {codebook.shape[1]}, query has {ctx.dim}")
    probes = np.vstack([ctx.query, ctx.canonicals]).astype(np.float64)
    out = np.empty(len(codebook))
    # Every probe goes through the same reduction so that a canonical equal
    # to the query gives a bitwise-equal dot product (score exactly 0.5).
    for start in range(0, len(codebook), _CHUNK):
        block = codebook[start : start + _CHUNK]
        dots = (block[:, None, :] * probes[None, :, :]).sum(axis=-1)
        # exp(a)/(exp(b)+exp(a)) == 1/(1+exp(b-a)); the min over canonicals
        # is attained at the largest b.
        gap = dots[:, 1:].max(axis=1) - dots[:, 0]
        out[start : start + _CHUNK] = 1.0 / (1.0 + np.exp(gap))
    return out


def relevancy_map(store: VqffStore, image_id, scale_id, ctx: QueryContext) -> RelevancyMap:
    table = codebook_relevancy(store.codebook(scale_id), ctx)
    return RelevancyMap(table[store.index_map(image_id, scale_id)], str(image_id), int(scale_id))


def multiscale_relevancy(store: VqffStore, image_id, ctx: QueryContext, tables=None) -> RelevancyMap:
    """Per-pixel maximum of the per-scale relevancy maps."""
    if tables is None:
        tables = [codebook_relevancy(book, ctx) for book in store.codebooks]
    i = store.image_index(image_id)
    out = tables[0][store.index_maps[i, 0]]
    for j in range(1, store.num_scales):
        out = np.maximum(out, tables[j][store.index_maps[i, j]])
    return RelevancyMap(out, str(image_id), None)


def mask_from_relevancy(rmap: RelevancyMap, tau: float = DEFAULT_TAU) -> Mask:
    """Strict threshold ``values > tau``."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    return Mask(rmap.values > tau, rmap.image_id)


class QueryEngine:
    """Holds a loaded store; every query scores each codebook once.

    The store's arrays are read-only and never copied, so repeated queries
    reuse the same codebooks.
    """

    def __init__(self, store: VqffStore):
        self.store = store

    def tables(self, ctx: QueryContext) -> list[np.ndarray]:
        return [codebook_relevancy(book, ctx) for book in self.store.codebooks]

    def relevancy(self, ctx: QueryContext, scale_id=None) -> list[RelevancyMap]:
        store = self.store
        tables = self.tables(ctx)
        if scale_id is None:
            return [multiscale_relevancy(store, im, ctx, tables) for im in store.image_ids]
        j = store.scale_index(scale_id)
        return [RelevancyMap(tables[j][store.index_maps[i, j]], im, int(scale_id)) for i, im in enumerate(store.image_ids)]

    def masks(self, ctx: QueryContext, tau: float | None = None, scale_id=None) -> list[Mask]:
        tau = ctx.threshold if tau is None else tau
        return [mask_from_relevancy(r, tau) for r in self.relevancy(ctx, scale_id)]


def scene_query(store: VqffStore, ctx: QueryContext, tau: float | None = None, scale_id=None) -> list[Mask]:
    """One mask per image (multiscale max unless ``scale_id`` is given)."""
    return QueryEngine(store).masks(ctx, tau, scale_id)


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------


def brute_force_relevancy(fmap: FeatureMap, ctx: QueryContext) -> np.ndarray:
    """Score every pixel of a dense map with the exponential form directly."""
    f = fmap.vectors().astype(np.float64)
    eq = np.exp(f @ ctx.query.astype(np.float64))
    scores = np.stack(
        [eq / (np.exp(f @ c.astype(np.float64)) + eq) for c in ctx.canonicals], axis=1
    ).min(axis=1)
    return scores.reshape(fmap.height, fmap.width)


def brute_force_scene(store: VqffStore, ctx: QueryContext) -> list[np.ndarray]:
    """Multiscale max relevancy per image, from reconstructed dense maps."""
    out = []
    for im in store.image_ids:
        per_scale = [brute_force_relevancy(reconstruct_feature_map(store, im, s), ctx) for s in store.scale_ids]
        out.append(np.max(np.stack(per_scale), axis=0))
    return out


# ---------------------------------------------------------------------------
# Detection metrics
# ---------------------------------------------------------------------------


def max_relevancy_location(rmap: RelevancyMap) -> tuple[int, int, float]:
    """Argmax of the map; ties resolve to the first pixel in raster order."""
    values = rmap.values
    if values.size == 0:
        raise ValueError("empty relevancy map")
    flat = int(np.argmax(values))
    row, col = divmod(flat, values.shape[1])
    return row, col, float(values[row, col])


@dataclass
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    precision_defined: bool
    recall_defined: bool


def _inside(row: int, col: int, box) -> bool:
    r0, c0, r1, c1 = box
    return r0 <= row <= r1 and c0 <= col <= c1


def detection_pr(predictions: dict, boxes: dict, thresholds) -> list[PRPoint]:
    """Precision/recall of max-relevancy localization over images.

    ``predictions`` maps image id to ``(row, col, value)``; ``boxes`` maps
    image id to a list of ``[row0, col0, row1, col1]`` boxes (inclusive) for
    the queried object.  At threshold ``t`` an image is a positive when its
    value is ``>= t``; a positive is a true positive when its location lies
    in one of the image's boxes.  Recall is over images with at least one
    box.  Undefined ratios are reported as 0 with the matching flag unset.
    """
    if set(predictions) != set(boxes):
        raise ValueError("predictions and annotations cover different images")
    ids = sorted(predictions)
    hit = {im: any(_inside(predictions[im][0], predictions[im][1], b) for b in boxes[im]) for im in ids}
    annotated = sum(1 for im in ids if boxes[im])
    curve = []
    for t in thresholds:
        pos = [im for im in ids if predictions[im][2] >= t]
        tp = sum(1 for im in pos if hit[im])
        fp = len(pos) - tp
        curve.append(
            PRPoint(
                threshold=float(t),
                tp=tp,
                fp=fp,
                fn=annotated - tp,
                precision=tp / len(pos) if pos else 0.0,
                recall=tp / annotated if annotated else 0.0,
                precision_defined=bool(pos),
                recall_defined=bool(annotated),
            )
        )
    return curve


def load_annotations(path, query_label: str | None = None) -> dict:
    """Read ``[{image_id, query_label, boxes}]`` into ``{image_id: [box, ...]}``."""
    try:
        items = json.loads(Path(path).read_text(encoding="utf-8"))
        out: dict = {}
        for item in items:
            if query_label is not None and item.get("query_label") != query_label:
                continue
            out.setdefault(str(item["image_id"]), []).extend([list(map(int, b)) for b in item["boxes"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed annotation file: {exc}", path=path) from exc
    return out


# ---------------------------------------------------------------------------
# VQFQ files
# ---------------------------------------------------------------------------


def encode_query(ctx: QueryContext) -> bytes:
    parts = [_VQFQ_HEADER.pack(VQFQ_MAGIC, VQFQ_VERSION, ctx.dim, len(ctx.canonicals))]
    for label, vec in [(ctx.label, ctx.query), *zip(ctx.phrases, ctx.canonicals)]:
        raw = label.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + np.asarray(vec, dtype="<f4").tobytes())
    return b"".join(parts)


def save_query(path, ctx: QueryContext) -> None:
    Path(path).write_bytes(encode_query(ctx))


def load_query(path, threshold: float = DEFAULT_TAU) -> QueryContext:
    buf = Path(path).read_bytes()
    if len(buf) < _VQFQ_HEADER.size:
        raise FormatError("truncated VQFQ header", path=path, offset=len(buf))
    magic, version, d, c = _VQFQ_HEADER.unpack_from(buf)
    if magic != VQFQ_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path=path, offset=0)
    if version != VQFQ_VERSION:
        raise FormatError(f"unsupported VQFQ version {version}", path=path, offset=4)
    pos = _VQFQ_HEADER.size
    labels, vecs = [], []
    for _ in range(c + 1):
        if pos + 4 > len(buf):
            raise FormatError("truncated label length", path=path, offset=pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n + 4 * d > len(buf):
            raise FormatError("truncated query record", path=path, offset=pos)
        try:
            labels.append(buf[pos : pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError("label is not UTF-8", path=path, offset=pos) from exc
        pos += n
        vecs.append(np.frombuffer(buf, dtype="<f4", count=d, offset=pos).astype(np.float32))
        pos += 4 * d
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", path=path, offset=pos)
    try:
        return QueryContext(vecs[0], np.array(vecs[1:]), labels[1:], threshold, labels[0])
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from exc
