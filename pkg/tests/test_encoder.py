import math

import numpy as np
import pytest

from eolo.core import Box4D, Point
from eolo.encoder import (
    InstanceAnnotation,
    KernelConfig,
    downsample_annotation,
    ellipse_gaussian_splat,
    encode_targets,
)


def square(h, w, y0, x0, size):
    m = np.zeros((h, w), bool)
    m[y0 : y0 + size, x0 : x0 + size] = True
    return m


def test_splat_value_one_radius_out():
    r = 3.0
    heat = np.zeros((15, 15))
    ellipse_gaussian_splat(heat, Point(7, 7), Box4D(r, r, r, r))
    assert heat[7, 7] == 1.0
    assert heat[7, 10] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert heat[4, 7] == pytest.approx(0.60653, abs=1e-5)


def test_splat_uses_per_side_radii():
    heat = np.zeros((20, 20))
    ellipse_gaussian_splat(heat, Point(10, 10), Box4D(2, 4, 6, 8))
    assert heat[10, 8] == pytest.approx(math.exp(-0.5))
    assert heat[10, 16] == pytest.approx(math.exp(-0.5))
    assert heat[6, 10] == pytest.approx(math.exp(-0.5))
    assert heat[18, 10] == pytest.approx(math.exp(-0.5))


def test_splat_out_of_bounds():
    with pytest.raises(ValueError, match="center out of bounds"):
        ellipse_gaussian_splat(np.zeros((4, 4)), Point(9, 1), Box4D(1, 1, 1, 1))


def test_overlapping_splats_combine_by_max():
    a, b = np.zeros((16, 16)), np.zeros((16, 16))
    ellipse_gaussian_splat(a, Point(5, 5), Box4D(3, 3, 4, 4))
    ellipse_gaussian_splat(b, Point(8, 7), Box4D(2, 5, 2, 5))
    both = np.zeros((16, 16))
    ellipse_gaussian_splat(both, Point(5, 5), Box4D(3, 3, 4, 4))
    ellipse_gaussian_splat(both, Point(8, 7), Box4D(2, 5, 2, 5))
    np.testing.assert_array_equal(both, np.maximum(a, b))


def test_circle_reduces_ellipse_when_radii_equal():
    r = Box4D(3, 3, 3, 3)
    e, c = np.zeros((12, 12)), np.zeros((12, 12))
    ellipse_gaussian_splat(e, Point(6, 6), r, KernelConfig(kernel_kind="ellipse-gaussian"))
    ellipse_gaussian_splat(c, Point(6, 6), r, KernelConfig(kernel_kind="circle-gaussian"))
    np.testing.assert_array_equal(e, c)


def test_circle_fixed_ignores_object_size():
    cfg = KernelConfig(kernel_kind="circle-fixed", fixed_radius=2.0)
    a, b = np.zeros((12, 12)), np.zeros((12, 12))
    ellipse_gaussian_splat(a, Point(6, 6), Box4D(1, 1, 1, 1), cfg)
    ellipse_gaussian_splat(b, Point(6, 6), Box4D(5, 2, 4, 3), cfg)
    np.testing.assert_array_equal(a, b)
    assert a[6, 8] == pytest.approx(math.exp(-0.5))


def test_square_instance_targets():
    ann = InstanceAnnotation(0, square(16, 16, 5, 5, 6))
    ts = encode_targets([ann], (1, 16, 16))
    assert ts.seg_map[0].sum() == 36
    (cls, (cy, cx), _), = ts.center_points
    assert (cy, cx) == (8, 8)
    np.testing.assert_array_equal(ts.size_map[:, cy, cx], [3, 3, 3, 3])
    assert ts.center_heatmap[0, cy, cx] == 1.0


def test_pixel_targets_reconstruct_the_box():
    ann = InstanceAnnotation(1, square(12, 12, 2, 3, 5))
    ts = encode_targets([ann], (2, 12, 12))
    ys, xs = np.nonzero(ann.mask)
    d = ts.size_map[:, ys, xs]
    assert np.all(d >= 0)
    np.testing.assert_array_equal(xs - d[0], ann.bbox.x1)
    np.testing.assert_array_equal(ys + d[3], ann.bbox.y2)
    assert not ts.size_valid[~ann.mask].any()


def test_disjoint_same_class_union():
    a = InstanceAnnotation(0, square(20, 20, 1, 1, 5))
    b = InstanceAnnotation(0, square(20, 20, 10, 12, 6))
    ts = encode_targets([a, b], (1, 20, 20))
    np.testing.assert_array_equal(ts.seg_map[0] > 0, a.mask | b.mask)
    for _, (cy, cx), _ in ts.center_points:
        assert ts.center_heatmap[0, cy, cx] == 1.0


def test_overlap_pixels_belong_to_smaller_box():
    big = InstanceAnnotation(0, square(20, 20, 2, 2, 10))
    small = InstanceAnnotation(0, square(20, 20, 8, 8, 5))
    ts = encode_targets([big, small], (1, 20, 20))
    overlap = big.mask & small.mask
    assert overlap.any()
    assert (ts.owner[overlap] == 1).all()
    ys, xs = np.nonzero(overlap)
    np.testing.assert_array_equal(xs - ts.size_map[0, ys, xs], small.bbox.x1)


def test_empty_scene():
    ts = encode_targets([], (2, 8, 8))
    assert ts.n_centers == 0
    assert not ts.center_heatmap.any() and not ts.size_valid.any()
    assert ts.center_cells().shape == (0, 2)


def test_encode_validates_inputs():
    with pytest.raises(ValueError, match="class_id"):
        encode_targets([InstanceAnnotation(3, square(8, 8, 0, 0, 2))], (2, 8, 8))
    with pytest.raises(ValueError, match="shape"):
        encode_targets([InstanceAnnotation(0, square(9, 8, 0, 0, 2))], (2, 8, 8))
    with pytest.raises(ValueError, match="empty instance"):
        InstanceAnnotation(0, np.zeros((4, 4), bool))
    with pytest.raises(ValueError):
        KernelConfig(kernel_kind="square")


def test_downsample_checkerboard_is_all_foreground():
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(bool)
    out = downsample_annotation(board, 2)
    assert out.shape == (4, 4) and out.all()


def test_downsample_threshold_and_errors():
    m = np.zeros((4, 4), bool)
    m[0, 0] = True  # 25% of the top-left block
    assert not downsample_annotation(m, 2).any()
    with pytest.raises(ValueError, match="divisible"):
        downsample_annotation(np.zeros((5, 4), bool), 2)
