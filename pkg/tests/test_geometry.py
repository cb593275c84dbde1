from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fqdet.geometry import (
    DELTA_CLAMP,
    RETINANET_RATIOS,
    RETINANET_SCALES,
    box_area,
    cwh_to_xyxy,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    generate_anchors,
    giou,
    giou_matrix,
    iou,
    iou_matrix,
    xyxy_to_cwh,
)

from .oracles import giou_by_definition, raster_iou

coord = st.floats(-50, 50, allow_nan=False)
extent = st.floats(0.5, 40, allow_nan=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(extent), draw(extent)
    return np.array([x, y, x + w, y + h])


def test_iou_worked_examples():
    assert iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, abs=1e-12)


def test_iou_matches_rasterization():
    assert abs(iou([0, 0, 2, 2], [1, 1, 3, 3]) - raster_iou([0, 0, 2, 2], [1, 1, 3, 3])) <= 1e-3


def test_iou_of_degenerate_boxes_is_zero():
    assert iou([1, 1, 1, 1], [1, 1, 1, 1]) == 0.0


def test_giou_worked_examples():
    assert giou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert abs(giou([0, 0, 1, 1], [2, 0, 3, 1]) - (-1 / 3)) <= 1e-9
    assert abs(giou([0, 0, 1, 1], [9, 0, 10, 1]) - (-0.8)) <= 1e-9


@given(boxes(), boxes())
def test_iou_and_giou_properties(a, b):
    v = iou(a, b)
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert 0.0 <= v <= 1.0
    g = giou(a, b)
    assert -1.0 <= g <= v + 1e-12
    assert g == pytest.approx(giou_by_definition(a, b), abs=1e-9)
    assert iou(a, a) == pytest.approx(1.0)


@given(boxes(), st.floats(0.1, 0.9), st.floats(0.1, 0.9))
def test_giou_equals_iou_when_one_contains_the_other(a, fx, fy):
    w, h = a[2] - a[0], a[3] - a[1]
    inner = np.array([a[0] + fx * w / 2, a[1] + fy * h / 2, a[2] - (1 - fx) * w / 2, a[3] - (1 - fy) * h / 2])
    assert giou(a, inner) == pytest.approx(iou(a, inner), abs=1e-12)


def test_matrix_forms_agree_with_pairwise(rng):
    a = cwh_to_xyxy(np.c_[rng.uniform(0, 50, (5, 2)), rng.uniform(1, 20, (5, 2))])
    b = cwh_to_xyxy(np.c_[rng.uniform(0, 50, (4, 2)), rng.uniform(1, 20, (4, 2))])
    m, gm = iou_matrix(a, b), giou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]))
            assert gm[i, j] == pytest.approx(giou_by_definition(a[i], b[j]), abs=1e-12)


def test_box_format_conversion_roundtrip(rng):
    xs = np.sort(rng.uniform(0, 100, (20, 2)), axis=1)
    ys = np.sort(rng.uniform(0, 100, (20, 2)), axis=1)
    b = np.c_[xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]]
    np.testing.assert_allclose(cwh_to_xyxy(xyxy_to_cwh(b)), b, atol=1e-12)
    np.testing.assert_allclose(box_area(b), (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]))


def test_encode_examples():
    np.testing.assert_array_equal(encode_box([3, 4, 9, 12], [3, 4, 9, 12]), np.zeros(4))
    np.testing.assert_allclose(encode_box([0, 0, 4, 4], [0, 0, 2, 2]), [0.5, 0.5, math.log(2), math.log(2)])


def test_encode_rejects_nonpositive_extent():
    with pytest.raises(ValueError):
        encode_box([0, 0, 0, 4], [0, 0, 2, 2])


def test_decode_examples():
    np.testing.assert_allclose(decode_box([0, 0, 0, 0], [3, 4, 9, 12]), [3, 4, 9, 12])
    np.testing.assert_allclose(decode_box([0.5, 0.5, math.log(2), math.log(2)], [0, 0, 2, 2], (100, 100)),
                               [0, 0, 4, 4], atol=1e-12)


def test_decode_clamps_log_scale():
    box = decode_box([0, 0, 50.0, 0], [0, 0, 2, 2])
    assert box[2] - box[0] == pytest.approx(2 * 1000 / 16)
    assert DELTA_CLAMP == pytest.approx(math.log(1000 / 16))


def test_decode_clips_to_image_but_anchor_may_exceed():
    out = decode_box([0, 0, 0, 0], [-12, -12, 20, 20], (16, 8))
    np.testing.assert_array_equal(out, [0, 0, 8, 16])


def test_encode_decode_roundtrip_10k(rng):
    n = 10_000
    anchors = cwh_to_xyxy(np.c_[rng.uniform(-20, 120, (n, 2)), rng.uniform(2, 80, (n, 2))])
    box_cwh = np.c_[rng.uniform(-20, 120, (n, 2)), rng.uniform(1, 100, (n, 2))]  # within the clamp: ratio <= 50
    boxes_ = cwh_to_xyxy(box_cwh)
    back = decode_boxes(encode_boxes(boxes_, anchors), anchors)
    assert np.abs(back - boxes_).max() <= 1e-9


def test_single_anchor_example():
    a = generate_anchors([(1, 1)], [8], scales=(1.0,), ratios=(1.0,))
    assert a.base_sizes == [32.0]
    np.testing.assert_array_equal(a.boxes, [[-12, -12, 20, 20]])


def test_anchor_count_for_three_levels():
    a = generate_anchors([(4, 4), (2, 2), (1, 1)], [8, 16, 32])
    assert len(a) == 189 and a.num_types == 9


@pytest.mark.parametrize("scales", [(1.0,), RETINANET_SCALES])
@pytest.mark.parametrize("ratios", [(1.0,), RETINANET_RATIOS])
def test_anchor_grid_configurations(scales, ratios):
    shapes, strides = [(16, 16), (8, 8), (4, 4)], [8, 16, 32]
    a = generate_anchors(shapes, strides, scales, ratios)
    n_types = len(scales) * len(ratios)
    assert len(a) == sum(h * w for h, w in shapes) * n_types
    lvl = a.levels
    typ = a.types
    scale_of = np.array([s for s in scales for _ in ratios])[typ]
    ratio_of = np.array([r for _ in scales for r in ratios])[typ]
    expected = (np.array([4.0 * s for s in strides])[lvl] * scale_of) ** 2
    np.testing.assert_allclose(box_area(a.boxes), expected, rtol=1e-12)
    w = a.boxes[:, 2] - a.boxes[:, 0]
    h = a.boxes[:, 3] - a.boxes[:, 1]
    np.testing.assert_allclose(h / w, ratio_of, rtol=1e-12)


def test_anchor_index_maps_compose_to_identity():
    a = generate_anchors([(3, 5), (2, 3)], [8, 16])
    flat = np.arange(len(a))
    lvl, y, x, t = a.unravel(flat)
    np.testing.assert_array_equal(a.ravel(lvl, y, x, t), flat)
    cx = (a.boxes[:, 0] + a.boxes[:, 2]) / 2
    np.testing.assert_allclose(cx, (x + 0.5) * np.array(a.strides)[lvl])


def test_empty_pyramid_rejected():
    with pytest.raises(ValueError):
        generate_anchors([], [])
