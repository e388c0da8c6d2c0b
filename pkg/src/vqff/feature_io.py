"""Feature map containers, file formats, and synthetic scenes.

Feature tensors are stored as ``VQFT`` files::

    b"VQFT" | version u32 | H u32 | W u32 | D u32 | H*W*D float32

all little-endian, row-major, pixel-major then component.  RGB images are
binary PPM (P6) and masks binary PGM (P5, 255 = true).
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import FormatError

VQFT_MAGIC = b"VQFT"
VQFT_VERSION = 1
_VQFT_HEADER = struct.Struct("<4sIIII")

# A float32 vector whose float64 norm is this close to 1 is already unit for
# our purposes; leaving it untouched makes normalization idempotent bitwise.
UNIT_TOL = 1e-6

# Largest payload we agree to allocate from a header (16 GiB of floats).
_MAX_ELEMENTS = 1 << 32


@dataclass
class FeatureMap:
    """One H x W grid of D-dimensional embeddings (float32, shape (H, W, D))."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"feature map must be (H, W, D), got shape {data.shape}")
        h, w, d = data.shape
        if h < 1 or w < 1:
            raise ValueError(f"feature map must be non-empty, got {h}x{w}")
        if d < 2:
            raise ValueError(f"feature dimension must be >= 2, got {d}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def vectors(self) -> np.ndarray:
        """Return the (H*W, D) view of the pixel vectors."""
        return self.data.reshape(-1, self.dim)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.data.astype(np.float64), axis=-1)


# ---------------------------------------------------------------------------
# VQFT files
# ---------------------------------------------------------------------------


def encode_vqft(array: np.ndarray) -> bytes:
    """Serialize an (H, W, D) array; D may be 1 for scalar maps."""
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError(f"expected (H, W, D) array, got shape {array.shape}")
    h, w, d = array.shape
    header = _VQFT_HEADER.pack(VQFT_MAGIC, VQFT_VERSION, h, w, d)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_vqft(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < _VQFT_HEADER.size:
        raise FormatError("truncated VQFT header", path=path, offset=len(buf))
    magic, version, h, w, d = _VQFT_HEADER.unpack_from(buf, 0)
    if magic != VQFT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VQFT_MAGIC!r}", path=path, offset=0)
    if version != VQFT_VERSION:
        raise FormatError(f"unsupported VQFT version {version}", path=path, offset=4)
    count = h * w * d
    if h == 0 or w == 0 or d == 0 or count > _MAX_ELEMENTS:
        raise FormatError(f"invalid dimensions {h}x{w}x{d}", path=path, offset=8)
    start = _VQFT_HEADER.size
    need = start + 4 * count
    if len(buf) < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(buf)}", path=path, offset=start
        )
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", path=path, offset=need)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return data.astype(np.float32).reshape(h, w, d)


def read_vqft(path) -> np.ndarray:
    return decode_vqft(Path(path).read_bytes(), path=path)


def write_vqft(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_vqft(array))


def load_feature_map(path) -> FeatureMap:
    """Read a ``VQFT`` file as a :class:`FeatureMap` (D must be >= 2)."""
    data = read_vqft(path)
    if data.shape[2] < 2:
        raise FormatError(f"feature dimension {data.shape[2]} < 2", path=path, offset=16)
    return FeatureMap(data)


def save_feature_map(path, fmap: FeatureMap) -> None:
    write_vqft(path, fmap.data)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def unit_rows(vectors: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Normalize rows of a 2-D array to unit length, returned as float32.

    Rows already unit within ``UNIT_TOL`` are passed through bit-for-bit.
    Rows with norm below ``eps`` become the first basis vector; the boolean
    mask of those rows is returned alongside.
    """
    v64 = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v64, axis=1)
    degenerate = norms < eps
    keep = np.abs(norms - 1.0) <= UNIT_TOL
    safe = np.where(degenerate, 1.0, norms)
    out = (v64 / safe[:, None]).astype(np.float32)
    src = np.asarray(vectors)
    if src.dtype == np.float32:
        out[keep] = src[keep]
    if degenerate.any():
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0
    return out, degenerate


def normalize_features(fmap: FeatureMap, eps: float = 1e-8) -> tuple[FeatureMap, int]:
    """Return a unit-norm copy of ``fmap`` and the number of fallback pixels.

    Pixels whose norm is below ``eps`` are replaced by ``(1, 0, ..., 0)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat, degenerate = unit_rows(fmap.vectors(), eps)
    return FeatureMap(flat.reshape(fmap.shape)), int(degenerate.sum())


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------


def _encode_pnm(kind: bytes, pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    return kind + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("PPM payload must be uint8 (H, W, 3)")
    Path(path).write_bytes(_encode_pnm(b"P6", rgb))


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a boolean mask (or uint8 image) as binary PGM."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.where(mask, 255, 0).astype(np.uint8)
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise ValueError("PGM payload must be uint8 or bool (H, W)")
    Path(path).write_bytes(_encode_pnm(b"P5", mask))


def _read_pnm(path, kind: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header", path=path, offset=pos)
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != kind:
        raise FormatError(f"expected {kind!r} image, got {tokens[0]!r}", path=path, offset=0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-numeric PNM header", path=path, offset=0) from exc
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", path=path, offset=0)
    need = w * h * channels
    if len(buf) - pos < need:
        raise FormatError("truncated PNM payload", path=path, offset=pos)
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def read_mask_pgm(path) -> np.ndarray:
    return read_pgm(path) >= 128


# ---------------------------------------------------------------------------
# Scene manifests
# ---------------------------------------------------------------------------


@dataclass
class ImageRecord:
    image_id: str
    features: dict[int, str]
    rgb: str | None = None
    pose: list[float] | None = None


@dataclass
class SceneManifest:
    """Images, their per-scale feature files, optional RGB and poses.

    Paths are relative to ``base_dir`` unless absolute.
    """

    scale_ids: list[int]
    images: list[ImageRecord]
    base_dir: Path | None = None

    def __post_init__(self):
        self.scale_ids = [int(s) for s in self.scale_ids]
        if len(set(self.scale_ids)) != len(self.scale_ids):
            raise ValueError("scale ids must be unique")
        ids = [rec.image_id for rec in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        for rec in self.images:
            if sorted(rec.features) != sorted(self.scale_ids):
                raise ValueError(
                    f"image {rec.image_id!r} lists scales {sorted(rec.features)}, "
                    f"expected {self.scale_ids}"
                )
            if rec.pose is not None and len(rec.pose) != 16:
                raise ValueError(f"image {rec.image_id!r} pose must have 16 entries")

    @property
    def num_images(self) -> int:
        return len(self.images)

    @property
    def num_scales(self) -> int:
        return len(self.scale_ids)

    @property
    def image_ids(self) -> list[str]:
        return [rec.image_id for rec in self.images]

    def resolve(self, relpath: str) -> Path:
        p = Path(relpath)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def to_json(self) -> dict:
        return {
            "num_images": self.num_images,
            "num_scales": self.num_scales,
            "scale_ids": self.scale_ids,
            "images": [
                {
                    "id": rec.image_id,
                    "rgb": rec.rgb,
                    "features": {str(s): rec.features[s] for s in self.scale_ids},
                    "pose": rec.pose,
                }
                for rec in self.images
            ],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SceneManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            images = [
                ImageRecord(
                    image_id=str(item["id"]),
                    features={int(k): v for k, v in item["features"].items()},
                    rgb=item.get("rgb"),
                    pose=item.get("pose"),
                )
                for item in doc["images"]
            ]
            manifest = cls(scale_ids=doc["scale_ids"], images=images, base_dir=path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed scene manifest: {exc}", path=path) from exc
        except ValueError as exc:
            raise FormatError(str(exc), path=path) from exc
        if doc.get("num_images", manifest.num_images) != manifest.num_images:
            raise FormatError("num_images disagrees with images[]", path=path)
        if doc.get("num_scales", manifest.num_scales) != manifest.num_scales:
            raise FormatError("num_scales disagrees with scale_ids", path=path)
        return manifest

    def feature_loader(self) -> Callable[[str, int], FeatureMap]:
        records = {rec.image_id: rec for rec in self.images}

        def load(image_id: str, scale_id: int) -> FeatureMap:
            return load_feature_map(self.resolve(records[image_id].features[scale_id]))

        return load

    def rgb_loader(self) -> Callable[[str], np.ndarray | None]:
        records = {rec.image_id: rec for rec in self.images}

        def load(image_id: str):
            rel = records[image_id].rgb
            return None if rel is None else read_ppm(self.resolve(rel))

        return load


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSceneSpec:
    num_images: int = 4
    num_scales: int = 2
    height: int = 64
    width: int = 64
    dim: int = 16
    num_regions: int = 4
    noise_sigma: float = 0.05
    seed: int = 0
    # Probability that each region other than region 0 appears in a given
    # image; below 1 the scene has objects missing from some frames.
    region_presence: float = 1.0

    def validate(self) -> None:
        if min(self.num_images, self.num_scales, self.height, self.width) < 1:
            raise ValueError("image count, scale count and image size must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.num_regions < 1:
            raise ValueError("num_regions must be >= 1")
        if self.num_regions > self.height * self.width:
            raise ValueError("num_regions exceeds the pixel count")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.region_presence <= 1.0:
            raise ValueError("region_presence must be in [0, 1]")


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    manifest: SceneManifest
    features: dict[tuple[str, int], FeatureMap]
    rgb: dict[str, np.ndarray]
    labels: np.ndarray  # (N, H, W) region index per pixel
    region_embeddings: np.ndarray  # (R, D) clean unit vectors
    region_colors: np.ndarray = field(repr=False, default=None)

    def load_features(self, image_id: str, scale_id: int) -> FeatureMap:
        return self.features[(image_id, scale_id)]

    def load_rgb(self, image_id: str) -> np.ndarray:
        return self.rgb[image_id]

    def clean_map(self, image_index: int) -> FeatureMap:
        """The noise-free feature map of one image (identical across scales)."""
        return FeatureMap(self.region_embeddings[self.labels[image_index]])

    def write(self, directory) -> Path:
        """Write features, RGB, manifest and ground truth; return the manifest path."""
        directory = Path(directory)
        (directory / "features").mkdir(parents=True, exist_ok=True)
        (directory / "rgb").mkdir(parents=True, exist_ok=True)
        for rec in self.manifest.images:
            for s in self.manifest.scale_ids:
                save_feature_map(directory / rec.features[s], self.features[(rec.image_id, s)])
            write_ppm(directory / rec.rgb, self.rgb[rec.image_id])
        np.savez(
            directory / "ground_truth.npz",
            labels=self.labels.astype(np.int32),
            region_embeddings=self.region_embeddings,
        )
        self.manifest.base_dir = directory
        path = directory / "scene.json"
        self.manifest.save(path)
        return path


def _region_colors(n: int) -> np.ndarray:
    colors = []
    for r in range(n):
        hue = (r * 0.618033988749895) % 1.0
        value = 0.95 if r % 2 == 0 else 0.55
        sat = 0.85 if (r // 2) % 2 == 0 else 0.55
        colors.append(colorsys.hsv_to_rgb(hue, sat, value))
    return np.round(np.asarray(colors) * 255).astype(np.uint8)


def voronoi_labels(sites: np.ndarray, site_ids: np.ndarray, height: int, width: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    pix = np.stack([rows.ravel() + 0.5, cols.ravel() + 0.5], axis=1)
    d2 = ((pix[:, None, :] - sites[None, :, :]) ** 2).sum(axis=-1)
    return site_ids[np.argmin(d2, axis=1)].reshape(height, width)


def generate_synthetic_scene(spec: SyntheticSceneSpec) -> SyntheticScene:
    """Build a Voronoi-partitioned scene with known clean region embeddings.

    Every region owns one unit embedding shared by all images and scales.
    Each image draws fresh Voronoi sites; pixel features are the region
    embedding plus i.i.d. Gaussian noise, renormalized.  The RGB rendering
    paints each region a flat distinct color.
    """
    spec.validate()
    n, h, w, d, r = spec.num_images, spec.height, spec.width, spec.dim, spec.num_regions
    rng = np.random.default_rng([spec.seed, 0])
    region_emb, _ = unit_rows(rng.standard_normal((r, d)))
    colors = _region_colors(r)

    scale_ids = list(range(spec.num_scales))
    labels = np.empty((n, h, w), dtype=np.int64)
    records, features, rgbs = [], {}, {}
    for i in range(n):
        img_rng = np.random.default_rng([spec.seed, 1, i])
        present = np.ones(r, dtype=bool)
        if r > 1:
            present[1:] = img_rng.random(r - 1) < spec.region_presence
        ids = np.flatnonzero(present)
        sites = img_rng.random((len(ids), 2)) * np.array([h, w])
        lab = voronoi_labels(sites, ids, h, w)
        labels[i] = lab
        image_id = f"img{i:04d}"
        for s in scale_ids:
            clean = region_emb[lab]
            if spec.noise_sigma > 0:
                noise_rng = np.random.default_rng([spec.seed, 2, i, s])
                noisy = clean.astype(np.float64) + noise_rng.normal(0.0, spec.noise_sigma, clean.shape)
                flat, _ = unit_rows(noisy.reshape(-1, d))
                fmap = FeatureMap(flat.reshape(h, w, d))
            else:
                fmap = FeatureMap(clean.copy())
            features[(image_id, s)] = fmap
        rgbs[image_id] = colors[lab]
        records.append(
            ImageRecord(
                image_id=image_id,
                features={s: f"features/{image_id}_s{s}.vqft" for s in scale_ids},
                rgb=f"rgb/{image_id}.ppm",
                pose=np.eye(4).ravel().tolist(),
            )
        )
    manifest = SceneManifest(scale_ids=scale_ids, images=records)
    return SyntheticScene(
        spec=spec,
        manifest=manifest,
        features=features,
        rgb=rgbs,
        labels=labels,
        region_embeddings=region_emb,
        region_colors=colors,
    )


# ---------------------------------------------------------------------------
# PCA false color
# ---------------------------------------------------------------------------


def pca_visualize(fmap: FeatureMap) -> np.ndarray:
    """Project pixels on the top-3 principal components, scaled to uint8 RGB.

    Component signs are fixed so that each component's largest-magnitude
    coordinate is positive.  Channels with zero spread render as 128.
    """
    if fmap.dim < 3:
        raise ValueError("PCA visualization needs D >= 3")
    x = fmap.vectors().astype(np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(len(x), 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:3]
    comps = evecs[:, order]
    for j in range(3):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    proj = centered @ comps
    out = np.full(proj.shape, 128.0)
    for j in range(3):
        if evals[order[j]] <= 1e-12:
            continue
        lo, hi = proj[:, j].min(), proj[:, j].max()
        if hi - lo > 1e-9:
            out[:, j] = (proj[:, j] - lo) / (hi - lo) * 255.0
    return np.round(out).astype(np.uint8).reshape(fmap.height, fmap.width, 3)
