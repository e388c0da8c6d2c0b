"""The persisted feature field: per-scale codebooks plus per-view index maps.

On disk a store is a directory holding

* ``codebook_s<scale>.vqfc`` --
  ``b"VQFC" | version u32 | scale_id u32 | K u32 | D u32 | K*D f32 | crc32 u32``
* ``index_<image>_s<scale>.vqfi`` --
  ``b"VQFI" | version u32 | image_index u32 | scale_id u32 | H u32 | W u32 |
  index_width u8 | H*W u16/u32 | crc32 u32``
* ``store.json`` -- ids, file table, build parameters and a stats snapshot.

All integers and floats are little-endian.  The trailing CRC32 covers every
preceding byte of its file.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NotFoundError
from .feature_io import FeatureMap
from .quantizer_local import spherical_mean

STORE_VERSION = 1
VQFC_MAGIC = b"VQFC"
VQFI_MAGIC = b"VQFI"
_VQFC_HEADER = struct.Struct("<4sIIII")
_VQFI_HEADER = struct.Struct("<4sIIIIIB")
_CRC = struct.Struct("<I")
MANIFEST_NAME = "store.json"
UNIT_NORM_TOL = 1e-4


def index_width(num_codes: int) -> int:
    """Bits per stored index: 16 while the codebook has at most 65535 rows."""
    return 16 if num_codes <= 65535 else 32


@dataclass(eq=False)
class VqffStore:
    image_ids: list[str]
    scale_ids: list[int]
    codebooks: list[np.ndarray]  # one (K_s, D) float32 array per scale
    index_maps: np.ndarray  # (N, M, H, W) uint32
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.image_ids = [str(i) for i in self.image_ids]
        self.scale_ids = [int(s) for s in self.scale_ids]
        self.codebooks = [np.ascontiguousarray(c, dtype=np.float32) for c in self.codebooks]
        self.index_maps = np.ascontiguousarray(self.index_maps, dtype=np.uint32)
        for arr in (*self.codebooks, self.index_maps):
            arr.flags.writeable = False
        self._image_pos = {im: i for i, im in enumerate(self.image_ids)}
        self._scale_pos = {s: j for j, s in enumerate(self.scale_ids)}

    @property
    def num_images(self) -> int:
        return len(self.image_ids)

    @property
    def num_scales(self) -> int:
        return len(self.scale_ids)

    @property
    def height(self) -> int:
        return self.index_maps.shape[2]

    @property
    def width(self) -> int:
        return self.index_maps.shape[3]

    @property
    def dim(self) -> int:
        return self.codebooks[0].shape[1]

    @property
    def codebook_sizes(self) -> list[int]:
        return [len(c) for c in self.codebooks]

    def image_index(self, image_id) -> int:
        try:
            return self._image_pos[str(image_id)]
        except KeyError:
            raise NotFoundError(f"unknown image id {image_id!r}") from None

    def scale_index(self, scale_id) -> int:
        try:
            return self._scale_pos[int(scale_id)]
        except (KeyError, ValueError):
            raise NotFoundError(f"unknown scale id {scale_id!r}") from None

    def index_map(self, image_id, scale_id) -> np.ndarray:
        return self.index_maps[self.image_index(image_id), self.scale_index(scale_id)]

    def codebook(self, scale_id) -> np.ndarray:
        return self.codebooks[self.scale_index(scale_id)]

    def validate(self) -> None:
        """Raise ``ValueError`` if any store invariant is violated."""
        n, m = len(self.image_ids), len(self.scale_ids)
        if len(set(self.image_ids)) != n or len(set(self.scale_ids)) != m:
            raise ValueError("image and scale ids must be unique")
        if self.index_maps.ndim != 4 or self.index_maps.shape[:2] != (n, m):
            raise ValueError(f"index maps shape {self.index_maps.shape} does not match {n}x{m}")
        if len(self.codebooks) != m:
            raise ValueError("one codebook per scale required")
        dims = {c.shape[1] for c in self.codebooks if c.ndim == 2}
        if len(dims) != 1 or any(c.ndim != 2 or len(c) == 0 for c in self.codebooks):
            raise ValueError("codebooks must be non-empty and share D")
        for j, book in enumerate(self.codebooks):
            norms = np.linalg.norm(book.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
            if len(bad):
                raise ValueError(f"scale {self.scale_ids[j]}: codebook row {bad[0]} is not unit norm")
            if n and self.index_maps[:, j].max() >= len(book):
                raise ValueError(f"scale {self.scale_ids[j]}: index exceeds codebook size {len(book)}")


# ---------------------------------------------------------------------------
# Reconstruction and fidelity
# ---------------------------------------------------------------------------


def reconstruct_feature_map(store: VqffStore, image_id, scale_id) -> FeatureMap:
    """Look every pixel up in its scale's codebook."""
    return FeatureMap(store.codebook(scale_id)[store.index_map(image_id, scale_id)])


def cosine_fidelity(original: FeatureMap, reconstructed: FeatureMap) -> float:
    """Mean per-pixel cosine similarity.

    Inputs are unit vectors up to float32 rounding; dividing by the norms
    anyway makes identical maps score exactly 1.0.  Zero pixels score 0.
    """
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch: {original.shape} vs {reconstructed.shape}")
    a = original.vectors().astype(np.float64)
    b = reconstructed.vectors().astype(np.float64)
    dots = np.einsum("ij,ij->i", a, b)
    scale = np.sqrt(np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", b, b))
    cos = np.divide(dots, scale, out=np.zeros_like(dots), where=scale > 0)
    return float(cos.mean())


def reference_map(fmap: FeatureMap) -> FeatureMap:
    """Every pixel replaced by the map's global spherical mean."""
    mean = spherical_mean(fmap.vectors())
    return FeatureMap(np.broadcast_to(mean, fmap.shape).copy())


# ---------------------------------------------------------------------------
# Memory accounting
# ---------------------------------------------------------------------------


@dataclass
class StoreStats:
    codebook_bytes: int
    index_bytes: int
    total_bytes: int
    raw_bytes: int
    bits_per_dim: float
    compression_ratio: float
    per_frame_mb: dict
    codebook_sizes: list[int]
    index_widths: list[int]

    def to_json(self) -> dict:
        return asdict(self)


def store_stats(store: VqffStore) -> StoreStats:
    """Exact payload byte counts at the persisted index widths.

    Headers and checksums are excluded; ``bits_per_dim`` is total payload
    bits over ``N*M*H*W*D`` and ``raw_bytes`` is the float32 size of the
    uncompressed maps.
    """
    n, h, w, d = store.num_images, store.height, store.width, store.dim
    widths = [index_width(k) for k in store.codebook_sizes]
    codebook_bytes = sum(k * d * 4 for k in store.codebook_sizes)
    index_bytes = sum(n * h * w * wb // 8 for wb in widths)
    total = codebook_bytes + index_bytes
    cells = n * store.num_scales * h * w * d
    raw = cells * 4
    per_frame = {
        "codebook": codebook_bytes / n / 1e6,
        "index": index_bytes / n / 1e6,
        "total": total / n / 1e6,
    }
    return StoreStats(
        codebook_bytes=codebook_bytes,
        index_bytes=index_bytes,
        total_bytes=total,
        raw_bytes=raw,
        bits_per_dim=total * 8 / cells,
        compression_ratio=raw / total,
        per_frame_mb=per_frame,
        codebook_sizes=list(store.codebook_sizes),
        index_widths=widths,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _with_crc(body: bytes) -> bytes:
    return body + _CRC.pack(zlib.crc32(body))


def _check_crc(buf: bytes, path) -> bytes:
    if len(buf) < _CRC.size:
        raise FormatError("file too short for checksum", path=path, offset=0)
    body, (crc,) = buf[: -_CRC.size], _CRC.unpack(buf[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch", path=path, offset=len(body))
    return body


def encode_codebook(scale_id: int, codebook: np.ndarray) -> bytes:
    k, d = codebook.shape
    header = _VQFC_HEADER.pack(VQFC_MAGIC, STORE_VERSION, scale_id, k, d)
    return _with_crc(header + np.ascontiguousarray(codebook, dtype="<f4").tobytes())


def decode_codebook(buf: bytes, path=None) -> tuple[int, np.ndarray]:
    body = _check_crc(buf, path)
    if len(body) < _VQFC_HEADER.size:
        raise FormatError("truncated VQFC header", path=path, offset=len(body))
    magic, version, scale_id, k, d = _VQFC_HEADER.unpack_from(body)
    if magic != VQFC_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path=path, offset=0)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported version {version}", path=path, offset=4)
    start = _VQFC_HEADER.size
    if len(body) != start + 4 * k * d:
        raise FormatError("codebook payload size mismatch", path=path, offset=start)
    data = np.frombuffer(body, dtype="<f4", offset=start).reshape(k, d).astype(np.float32)
    return scale_id, data


def encode_index_map(image_index: int, scale_id: int, index_map: np.ndarray, width: int) -> bytes:
    h, w = index_map.shape
    header = _VQFI_HEADER.pack(VQFI_MAGIC, STORE_VERSION, image_index, scale_id, h, w, width)
    dtype = "<u2" if width == 16 else "<u4"
    return _with_crc(header + np.ascontiguousarray(index_map).astype(dtype).tobytes())


def decode_index_map(buf: bytes, path=None) -> tuple[int, int, int, np.ndarray]:
    body = _check_crc(buf, path)
    if len(body) < _VQFI_HEADER.size:
        raise FormatError("truncated VQFI header", path=path, offset=len(body))
    magic, version, image_index, scale_id, h, w, width = _VQFI_HEADER.unpack_from(body)
    if magic != VQFI_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path=path, offset=0)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported version {version}", path=path, offset=4)
    if width not in (16, 32):
        raise FormatError(f"index width {width} not in {{16, 32}}", path=path, offset=24)
    start = _VQFI_HEADER.size
    if len(body) != start + h * w * width // 8:
        raise FormatError("index payload size mismatch", path=path, offset=start)
    dtype = "<u2" if width == 16 else "<u4"
    data = np.frombuffer(body, dtype=dtype, offset=start).reshape(h, w).astype(np.uint32)
    return image_index, scale_id, width, data


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_store(store: VqffStore, directory) -> Path:
    """Write ``store`` under ``directory``; returns the manifest path."""
    store.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scales, images = [], []
    widths = []
    for j, s in enumerate(store.scale_ids):
        book = store.codebooks[j]
        blob = encode_codebook(s, book)
        name = f"codebook_s{s}.vqfc"
        (directory / name).write_bytes(blob)
        width = index_width(len(book))
        widths.append(width)
        scales.append(
            {"scale_id": s, "K": len(book), "index_width": width, "file": name, "crc32": zlib.crc32(blob)}
        )
    for i, image_id in enumerate(store.image_ids):
        maps = {}
        for j, s in enumerate(store.scale_ids):
            blob = encode_index_map(i, s, store.index_maps[i, j], widths[j])
            name = f"index_{i:05d}_s{s}.vqfi"
            (directory / name).write_bytes(blob)
            maps[str(s)] = {"file": name, "crc32": zlib.crc32(blob)}
        images.append({"id": image_id, "index": i, "maps": maps})
    doc = {
        "format": "vqff-store",
        "version": STORE_VERSION,
        "num_images": store.num_images,
        "num_scales": store.num_scales,
        "height": store.height,
        "width": store.width,
        "dim": store.dim,
        "scale_ids": store.scale_ids,
        "scales": scales,
        "images": images,
        "seed": store.seed,
        "params": _jsonable(store.params),
        "stats": _jsonable(store_stats(store).to_json()),
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise FormatError("missing store file", path=path) from None


def load_store(directory) -> VqffStore:
    """Read and re-validate a store written by :func:`save_store`."""
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    try:
        doc = json.loads(_read(mpath).decode("utf-8"))
        scale_ids = [int(s) for s in doc["scale_ids"]]
        h, w, d = int(doc["height"]), int(doc["width"]), int(doc["dim"])
        scale_entries = doc["scales"]
        image_entries = doc["images"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed store manifest: {exc}", path=mpath) from exc

    codebooks = []
    for j, entry in enumerate(scale_entries):
        path = directory / entry["file"]
        buf = _read(path)
        if zlib.crc32(buf) != entry["crc32"]:
            raise FormatError("file checksum differs from manifest", path=path)
        scale_id, book = decode_codebook(buf, path)
        if scale_id != scale_ids[j] or book.shape[1] != d:
            raise FormatError("codebook header disagrees with manifest", path=path, offset=8)
        codebooks.append(book)

    index_maps = np.empty((len(image_entries), len(scale_ids), h, w), dtype=np.uint32)
    for i, entry in enumerate(image_entries):
        for j, s in enumerate(scale_ids):
            ref = entry["maps"][str(s)]
            path = directory / ref["file"]
            buf = _read(path)
            if zlib.crc32(buf) != ref["crc32"]:
                raise FormatError("file checksum differs from manifest", path=path)
            image_index, scale_id, width, imap = decode_index_map(buf, path)
            if image_index != i or scale_id != s or imap.shape != (h, w):
                raise FormatError("index map header disagrees with manifest", path=path, offset=8)
            if width != scale_entries[j]["index_width"]:
                raise FormatError("index width disagrees with manifest", path=path, offset=24)
            index_maps[i, j] = imap

    store = VqffStore(
        image_ids=[e["id"] for e in image_entries],
        scale_ids=scale_ids,
        codebooks=codebooks,
        index_maps=index_maps,
        params=doc.get("params", {}),
        seed=int(doc.get("seed", 0)),
    )
    try:
        store.validate()
    except ValueError as exc:
        raise FormatError(f"invalid store: {exc}", path=directory) from exc
    return store
