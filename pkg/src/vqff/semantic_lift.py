"""Mask-gated lifting inputs, edit composition and frame selection."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .feature_io import FeatureMap, read_mask_pgm, read_ppm, read_vqft, write_pgm, write_ppm, write_vqft
from .query_engine import Mask


def _mask_bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)


def apply_bitmask(payload, mask):
    """Zero every pixel outside ``mask``; works on RGB arrays and feature maps."""
    bits = _mask_bits(mask)
    data = payload.data if isinstance(payload, FeatureMap) else np.asarray(payload)
    if data.shape[:2] != bits.shape:
        raise ValueError(f"mask {bits.shape} does not match payload {data.shape[:2]}")
    sel = bits.reshape(bits.shape + (1,) * (data.ndim - 2))
    out = np.where(sel, data, np.zeros((), dtype=data.dtype))
    return FeatureMap(out) if isinstance(payload, FeatureMap) else out


def compose_edit(original: np.ndarray, edited: np.ndarray, mask) -> np.ndarray:
    """Pixels inside the mask come from ``edited``, all others from ``original``."""
    bits = _mask_bits(mask)
    original = np.asarray(original)
    edited = np.asarray(edited)
    if original.shape != edited.shape or original.shape[:2] != bits.shape:
        raise ValueError(
            f"shape mismatch: original {original.shape}, edited {edited.shape}, mask {bits.shape}"
        )
    sel = bits.reshape(bits.shape + (1,) * (original.ndim - 2))
    return np.where(sel, edited, original)


def frame_relevance_filter(
    masks: Sequence, pixels: int | None = None, fraction: float | None = None
) -> list[bool]:
    """``True`` for frames whose mask covers strictly more than ``pixels`` pixels.

    ``fraction`` expresses the same bound relative to the frame size and wins
    when both are given.
    """
    out = []
    for mask in masks:
        bits = _mask_bits(mask)
        if fraction is not None:
            limit = fraction * bits.size
        elif pixels is not None:
            limit = pixels
        else:
            limit = 0
        if limit < 0:
            raise ValueError("pixel threshold must be >= 0")
        out.append(int(np.count_nonzero(bits)) > limit)
    return out


@dataclass
class FrameSelection:
    selected: list[str]
    areas: dict[str, float]
    groups: dict[str, str]  # image id -> "top" | "bottom" for survivors
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def stride_sample(items: Sequence, cap: int) -> list:
    """Every ``ceil(len/cap)``-th item starting at index 0, at most ``cap`` items."""
    if cap <= 0 or not items:
        return []
    stride = math.ceil(len(items) / cap)
    return list(items[::stride])[:cap]


def select_frames(
    masks: Sequence,
    rel_threshold: float = 0.10,
    cap_per_group: int = 25,
    total_cap: int = 50,
    image_ids: Sequence[str] | None = None,
) -> FrameSelection:
    """Pick a diverse, relevant subset of frames from their masks.

    Frames whose mask area fraction is below ``rel_threshold`` are dropped.
    Survivors are ranked by area (ties by sequence order); the upper half
    (the extra frame on odd counts) forms the top group.  Each group, kept in
    sequence order, is stride-sampled from index 0 with at most
    ``cap_per_group`` frames; ``total_cap`` is split between the groups,
    top first.
    """
    if not 0.0 <= rel_threshold <= 1.0:
        raise ValueError("rel_threshold must be in [0, 1]")
    if cap_per_group < 0 or total_cap < 0:
        raise ValueError("caps must be >= 0")
    if image_ids is None:
        image_ids = [m.image_id if isinstance(m, Mask) and m.image_id else str(i) for i, m in enumerate(masks)]
    image_ids = list(image_ids)
    areas = [float(np.count_nonzero(_mask_bits(m))) / _mask_bits(m).size for m in masks]

    survivors = [i for i, a in enumerate(areas) if a >= rel_threshold]
    ranked = sorted(survivors, key=lambda i: (-areas[i], i))
    n_top = (len(ranked) + 1) // 2
    top = sorted(ranked[:n_top])
    bottom = sorted(ranked[n_top:])

    top_cap = min(cap_per_group, math.ceil(total_cap / 2))
    picked_top = stride_sample(top, top_cap)
    bottom_cap = min(cap_per_group, total_cap - len(picked_top))
    picked_bottom = stride_sample(bottom, bottom_cap)

    groups = {image_ids[i]: "top" for i in top}
    groups.update({image_ids[i]: "bottom" for i in bottom})
    return FrameSelection(
        selected=[image_ids[i] for i in sorted(picked_top + picked_bottom)],
        areas={image_ids[i]: areas[i] for i in range(len(areas))},
        groups=groups,
        params={"rel_threshold": rel_threshold, "cap_per_group": cap_per_group, "total_cap": total_cap},
    )


# ---------------------------------------------------------------------------
# Lift archives
# ---------------------------------------------------------------------------


@dataclass
class LiftItem:
    image_id: str
    payload: object  # RGB uint8 (H, W, 3) or FeatureMap
    mask: np.ndarray  # (H, W) bool
    pose: list[float] | None = None


def lift_passthrough(items: Sequence[LiftItem], directory, mode: str = "bitmask") -> Path:
    """Write masked payloads, masks and poses for an external lifter.

    Only masking is applied.  Returns the archive manifest path.
    """
    if mode != "bitmask":
        raise ValueError(f"unsupported masking mode {mode!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for item in items:
        bits = _mask_bits(item.mask)
        masked = apply_bitmask(item.payload, bits)
        mask_name = f"{item.image_id}_mask.pgm"
        if isinstance(item.payload, FeatureMap):
            payload_name = f"{item.image_id}.vqft"
            write_vqft(directory / payload_name, masked.data)
        else:
            payload_name = f"{item.image_id}.ppm"
            write_ppm(directory / payload_name, masked)
        write_pgm(directory / mask_name, bits)
        records.append(
            {
                "image_id": item.image_id,
                "pose": item.pose,
                "mask_path": mask_name,
                "payload_path": payload_name,
                "mask_pixels": int(np.count_nonzero(bits)),
            }
        )
    path = directory / "lift.json"
    path.write_text(json.dumps({"mode": mode, "frames": records}, indent=2) + "\n", encoding="utf-8")
    return path


def read_lift_archive(path) -> list[LiftItem]:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    items = []
    for rec in doc["frames"]:
        payload_path = path.parent / rec["payload_path"]
        if payload_path.suffix == ".vqft":
            payload = FeatureMap(read_vqft(payload_path))
        else:
            payload = read_ppm(payload_path)
        items.append(LiftItem(rec["image_id"], payload, read_mask_pgm(path.parent / rec["mask_path"]), rec["pose"]))
    return items
