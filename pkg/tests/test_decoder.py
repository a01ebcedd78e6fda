import numpy as np
import pytest

from eolo.core import BoundingBox, Point
from eolo.decoder import (
    DecodeConfig,
    Detection,
    InstanceResult,
    assign_pixels,
    attach_boxes,
    decode,
    extract_peaks,
    nms,
    refine_mask,
)
from eolo.encoder import InstanceAnnotation, encode_targets
from oracles import nms_ref, peaks_ref


def rect(h, w, y0, x0, y1, x1):
    m = np.zeros((h, w), bool)
    m[y0:y1, x0:x1] = True
    return m


def test_peaks_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        heat = rng.random((3, 16, 16))
        heat[rng.random(heat.shape) < 0.2] = 0.7  # plateaus and ties
        cfg = DecodeConfig(score_threshold=0.3, top_k=40)
        got = [(d.class_id, int(d.center.y), int(d.center.x), d.score) for d in extract_peaks(heat, cfg)]
        assert got == peaks_ref(heat, 0.3, 40)


def test_peaks_empty_and_border():
    assert extract_peaks(np.zeros((2, 5, 5))) == []
    heat = np.zeros((1, 4, 4))
    heat[0, 0, 3] = 0.9
    (d,) = extract_peaks(heat)
    assert (d.center.x, d.center.y, d.score) == (3.0, 0.0, 0.9)


def test_attach_boxes_recovers_annotation_boxes():
    anns = [InstanceAnnotation(0, rect(24, 24, 2, 3, 9, 15)), InstanceAnnotation(1, rect(24, 24, 12, 10, 22, 14))]
    ts = encode_targets(anns, (2, 24, 24))
    dets = attach_boxes(extract_peaks(ts.center_heatmap), ts.size_map)
    boxes = {d.class_id: d.box for d in dets if d.score == 1.0}
    assert boxes[0] == anns[0].bbox
    assert boxes[1] == anns[1].bbox


def test_attach_boxes_clamps_negative_distances():
    size = np.full((4, 3, 3), -2.0)
    (d,) = attach_boxes([Detection(0, Point(1, 1), 0.9)], size)
    assert d.box == BoundingBox(1, 1, 1, 1)


def _random_dets(rng, n):
    out = []
    for _ in range(n):
        x, y = rng.uniform(0, 30, 2)
        w, h = rng.uniform(1, 12, 2)
        out.append(Detection(int(rng.integers(2)), Point(x, y), float(rng.random()), BoundingBox(x, y, x + w, y + h)))
    return sorted(out, key=lambda d: -d.score)


def test_nms_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(50):
        dets = _random_dets(rng, 20)
        kept = nms(dets, 0.5)
        ref = nms_ref([d.box for d in dets], [d.score for d in dets], [d.class_id for d in dets], 0.5)
        assert kept == [dets[i] for i in ref]


def test_nms_never_suppresses_across_classes():
    box = BoundingBox(0, 0, 4, 4)
    dets = [Detection(0, Point(2, 2), 0.9, box), Detection(1, Point(2, 2), 0.8, box)]
    assert nms(dets, 0.1) == dets


def test_single_instance_mask_exact():
    ann = InstanceAnnotation(0, rect(16, 16, 3, 4, 11, 9))
    ts = encode_targets([ann], (1, 16, 16))
    (res,) = decode(ts.center_heatmap, ts.size_map, ts.seg_map)
    np.testing.assert_array_equal(res.mask, ann.mask)
    assert res.detection.box == ann.bbox


def test_overlap_partition_matches_encoder():
    big = InstanceAnnotation(0, rect(24, 24, 2, 2, 16, 14))
    small = InstanceAnnotation(0, rect(24, 24, 10, 9, 20, 20))
    ts = encode_targets([big, small], (1, 24, 24))
    diag = {}
    res = decode(ts.center_heatmap, ts.size_map, ts.seg_map, diagnostics=diag)
    assert len(res) == 2 and diag["unassigned_pixels"] == 0
    for r in res:
        k = 0 if r.detection.box == big.bbox else 1
        np.testing.assert_array_equal(r.mask, ts.owner == k)


def test_pixels_outside_every_box_are_unassigned():
    seg = np.zeros((1, 10, 10))
    seg[0, 0, 0] = seg[0, 5, 5] = 1.0
    det = Detection(0, Point(5, 5), 0.9, BoundingBox(4, 4, 6, 6))
    diag = {}
    (res,) = assign_pixels([det], seg, np.zeros((4, 10, 10)), DecodeConfig(), diag)
    assert res.mask.sum() == 1 and diag["unassigned_pixels"] == 1


def test_detection_without_pixels_is_dropped():
    det = Detection(0, Point(5, 5), 0.9, BoundingBox(4, 4, 6, 6))
    assert assign_pixels([det], np.zeros((1, 10, 10)), np.zeros((4, 10, 10))) == []


def test_decode_rejects_inconsistent_shapes():
    with pytest.raises(ValueError, match="inconsistent"):
        decode(np.zeros((2, 8, 8)), np.zeros((4, 8, 8)), np.zeros((1, 8, 8)))
    with pytest.raises(ValueError, match="4 channels"):
        decode(np.zeros((1, 8, 8)), np.zeros((3, 8, 8)), np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        DecodeConfig(score_threshold=1.5)


def test_decode_with_nms_removes_duplicates():
    ann = InstanceAnnotation(0, rect(16, 16, 2, 2, 14, 14))
    ts = encode_targets([ann], (1, 16, 16))
    center = ts.center_heatmap.copy()
    center[0, 3, 3] = 0.95  # spurious second peak inside the object
    size = ts.size_map.copy()
    size[:, 3, 3] = (1, 1, 11, 11)
    plain = decode(center, size, ts.seg_map)
    with_nms = decode(center, size, ts.seg_map, DecodeConfig(nms_iou=0.5))
    assert len(plain) >= 1 and len(with_nms) == 1
    np.testing.assert_array_equal(with_nms[0].mask, ann.mask)


def test_refine_excludes_zero_border_ring():
    mask = np.ones((4, 4), bool)
    res = InstanceResult(Detection(0, Point(2, 2), 0.9, BoundingBox(0, 0, 4, 4)), mask)
    hi = np.ones((1, 8, 8))
    hi[0, 0, :] = hi[0, -1, :] = hi[0, :, 0] = hi[0, :, -1] = 0.0
    out = refine_mask(res, hi)
    assert out.mask.shape == (8, 8) and out.scale == 2
    assert not out.mask[0].any() and not out.mask[:, -1].any()
    assert out.mask[1:-1, 1:-1].all()


def test_refine_averages_several_maps_and_checks_shapes():
    res = InstanceResult(Detection(0, Point(1, 1), 0.9, BoundingBox(0, 0, 2, 2)), np.ones((2, 2), bool))
    out = refine_mask(res, [np.full((1, 4, 4), 0.8), np.full((1, 8, 8), 0.4)])
    assert out.mask.shape == (8, 8) and out.mask.all()
    with pytest.raises(ValueError, match="multiple"):
        refine_mask(res, np.ones((1, 5, 5)))
    assert refine_mask(res, None) is res


def test_decode_drops_masks_emptied_by_refinement():
    ann = InstanceAnnotation(0, rect(8, 8, 2, 2, 6, 6))
    ts = encode_targets([ann], (1, 8, 8))
    out = decode(ts.center_heatmap, ts.size_map, ts.seg_map, hi_res_seg=[np.zeros((1, 16, 16))])
    assert out == []
