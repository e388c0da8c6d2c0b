import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_map
from vqff.feature_io import FeatureMap
from vqff.query_engine import Mask
from vqff.semantic_lift import (
    LiftItem,
    apply_bitmask,
    compose_edit,
    frame_relevance_filter,
    lift_passthrough,
    read_lift_archive,
    select_frames,
    stride_sample,
)


def reference_selection(areas, rel_threshold, cap_per_group, total_cap):
    """Straightforward re-statement of the selection procedure."""
    keep = [i for i in range(len(areas)) if areas[i] >= rel_threshold]
    order = sorted(keep, key=lambda i: (-areas[i], i))
    half = math.ceil(len(order) / 2)
    top = sorted(order[:half])
    bottom = sorted(order[half:])

    def sample(group, cap):
        if cap <= 0 or not group:
            return []
        step = math.ceil(len(group) / cap)
        out = []
        k = 0
        while k < len(group) and len(out) < cap:
            out.append(group[k])
            k += step
        return out

    first = sample(top, min(cap_per_group, math.ceil(total_cap / 2)))
    second = sample(bottom, min(cap_per_group, total_cap - len(first)))
    return sorted(first + second)


def masks_with_areas(pixel_counts, h=10, w=10):
    out = []
    for n in pixel_counts:
        bits = np.zeros(h * w, dtype=bool)
        bits[:n] = True
        out.append(bits.reshape(h, w))
    return out


def test_bitmask_full_empty_and_checkerboard(rng):
    img = rng.integers(0, 256, (6, 5, 3), dtype=np.uint8)
    assert np.array_equal(apply_bitmask(img, np.ones((6, 5), bool)), img)
    assert not apply_bitmask(img, np.zeros((6, 5), bool)).any()
    checker = (np.indices((6, 5)).sum(axis=0) % 2).astype(bool)
    out = apply_bitmask(img, Mask(checker))
    for r in range(6):
        for c in range(5):
            assert np.array_equal(out[r, c], img[r, c] if checker[r, c] else [0, 0, 0])
    fmap = random_map(1, 6, 5, 4)
    masked = apply_bitmask(fmap, checker)
    assert isinstance(masked, FeatureMap)
    assert np.array_equal(masked.data[checker], fmap.data[checker]) and not masked.data[~checker].any()
    with pytest.raises(ValueError):
        apply_bitmask(img, np.ones((5, 5), bool))


def test_compose_edit_examples(rng):
    orig = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    edit = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert compose_edit(orig, edit, np.zeros((8, 8), bool)).tobytes() == orig.tobytes()
    assert compose_edit(orig, edit, np.ones((8, 8), bool)).tobytes() == edit.tobytes()
    half = np.zeros((8, 8), bool)
    half[:, :4] = True
    out = compose_edit(orig, edit, half)
    for r in range(8):
        for c in range(8):
            assert np.array_equal(out[r, c], edit[r, c] if half[r, c] else orig[r, c])
    with pytest.raises(ValueError):
        compose_edit(orig, edit[:, :7], half)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 12))
def test_compose_edit_partition(seed, h, w):
    rng = np.random.default_rng(seed)
    orig = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    edit = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    mask = rng.random((h, w)) > 0.5
    out = compose_edit(orig, edit, mask)
    from_orig = np.all(out == orig, axis=-1)
    from_edit = np.all(out == edit, axis=-1)
    assert np.all(from_orig | from_edit)
    assert np.all(from_edit[mask]) and np.all(from_orig[~mask])


def test_frame_filter_examples():
    masks = masks_with_areas([0, 1, 30, 100])
    assert frame_relevance_filter(masks, pixels=0) == [False, True, True, True]
    assert frame_relevance_filter(masks, pixels=100) == [False] * 4
    assert frame_relevance_filter(masks, pixels=30) == [False, False, False, True]
    assert frame_relevance_filter(masks, pixels=0, fraction=0.3) == [False, False, False, True]
    with pytest.raises(ValueError):
        frame_relevance_filter(masks, pixels=-1)


def test_select_frames_all_below_threshold():
    sel = select_frames(masks_with_areas([0, 5, 9]), rel_threshold=0.10)
    assert sel.selected == []


def test_select_frames_under_cap():
    sel = select_frames(masks_with_areas([50, 20, 30, 40]), image_ids=list("abcd"))
    assert sel.selected == list("abcd")
    assert sel.groups == {"a": "top", "d": "top", "b": "bottom", "c": "bottom"}
    assert sel.areas["a"] == 0.5


def test_select_frames_hundred_distinct_areas():
    rng = np.random.default_rng(0)
    counts = rng.permutation(np.arange(20, 120))  # 100 distinct areas, all >= 10% of 200 px
    masks = masks_with_areas(counts, h=10, w=20)
    sel = select_frames(masks, image_ids=[f"f{i:03d}" for i in range(100)])
    areas = [c / 200 for c in counts]
    expected = reference_selection(areas, 0.10, 25, 50)
    assert sel.selected == [f"f{i:03d}" for i in expected]
    assert len(sel.selected) == 50
    groups = [sel.groups[s] for s in sel.selected]
    assert groups.count("top") == 25 and groups.count("bottom") == 25


@given(
    st.lists(st.integers(0, 100), min_size=0, max_size=120),
    st.floats(0, 1),
    st.integers(0, 30),
    st.integers(0, 60),
)
def test_select_frames_matches_reference_and_caps(counts, thr, cap, total):
    masks = masks_with_areas(counts)
    sel = select_frames(masks, thr, cap, total)
    areas = [c / 100 for c in counts]
    assert sel.selected == [str(i) for i in reference_selection(areas, thr, cap, total)]
    assert len(sel.selected) <= min(total, 2 * cap)
    assert all(sel.areas[s] >= thr for s in sel.selected)
    assert select_frames(masks, thr, cap, total) == sel


def test_stride_sample():
    assert stride_sample(list(range(50)), 25) == list(range(0, 50, 2))
    assert stride_sample(list(range(7)), 3) == [0, 3, 6]
    assert stride_sample([], 3) == [] and stride_sample([1], 0) == []


def test_select_frames_validation():
    with pytest.raises(ValueError):
        select_frames([], rel_threshold=1.5)
    with pytest.raises(ValueError):
        select_frames([], cap_per_group=-1)


def test_frame_reduction_when_object_missing():
    counts = [0, 40, 0, 35, 50, 0, 20, 0]
    sel = select_frames(masks_with_areas(counts))
    assert len(sel.selected) < len(counts)


def test_lift_identity_masks_equal_plain_inputs(tmp_path, rng):
    items = [
        LiftItem("a", rng.integers(0, 256, (5, 6, 3), dtype=np.uint8), np.ones((5, 6), bool), list(np.eye(4).ravel())),
        LiftItem("b", random_map(3, 5, 6, 4), np.ones((5, 6), bool), None),
    ]
    path = lift_passthrough(items, tmp_path)
    back = read_lift_archive(path)
    assert back[0].payload.tobytes() == items[0].payload.tobytes()
    assert back[1].payload.data.tobytes() == items[1].payload.data.tobytes()
    assert back[0].pose == items[0].pose and back[1].pose is None


def test_lift_archive_roundtrip_and_counts(tmp_path, rng):
    items = []
    for i in range(3):
        img = rng.integers(0, 256, (7, 4, 3), dtype=np.uint8)
        items.append(LiftItem(f"v{i}", img, rng.random((7, 4)) > 0.4, [float(i)] * 16))
    path = lift_passthrough(items, tmp_path)
    back = read_lift_archive(path)
    for orig, item in zip(items, back):
        assert item.image_id == orig.image_id and item.pose == orig.pose
        assert np.array_equal(item.mask, orig.mask)
        assert np.array_equal(item.payload, apply_bitmask(orig.payload, orig.mask))
    import json

    doc = json.loads(path.read_text())
    assert sum(f["mask_pixels"] for f in doc["frames"]) == sum(int(it.mask.sum()) for it in items)
    with pytest.raises(ValueError):
        lift_passthrough(items, tmp_path, mode="composite")
