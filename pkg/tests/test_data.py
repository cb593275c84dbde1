from __future__ import annotations

import json
import logging

import numpy as np
import pytest

from fqdet.data import (
    Backbone,
    CocoFormatError,
    SceneSpec,
    SyntheticDataset,
    export_coco_annotations,
    generate_sample,
    hflip,
    load_coco_annotations,
    synthetic_to_coco,
    train_val_datasets,
)
from fqdet.tensorcore import Tensor, gradcheck_random
from fqdet.tensorcore import tensor as T


def test_same_seed_and_index_is_bitwise_identical():
    spec = SceneSpec(seed=5)
    a, b = generate_sample(spec, 17), generate_sample(spec, 17)
    assert a.image.tobytes() == b.image.tobytes()
    np.testing.assert_array_equal(a.boxes, b.boxes)
    np.testing.assert_array_equal(a.classes, b.classes)
    assert generate_sample(SceneSpec(seed=6), 17).image.tobytes() != a.image.tobytes()


def test_object_count_in_range_for_10k_samples():
    spec = SceneSpec(image_size=32, min_size=4, max_size=12, min_objects=2, max_objects=5)
    counts = [len(generate_sample(spec, i).boxes) for i in range(10_000)]
    assert min(counts) >= 2 and max(counts) <= 5
    assert set(counts) == {2, 3, 4, 5}


def _iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def test_rendered_support_matches_recorded_box():
    spec = SceneSpec()
    for idx in range(200):
        smp = generate_sample(spec, idx, return_masks=True)
        assert smp.image.min() >= 0 and smp.image.max() <= 1
        for box, mask in zip(smp.boxes, smp.masks):
            ys, xs = np.nonzero(mask)
            support = [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1]
            assert _iou(support, box) >= 0.99
            assert 0 <= box[0] < box[2] <= spec.image_size and 0 <= box[1] < box[3] <= spec.image_size


def test_classes_have_distinct_colors():
    spec = SceneSpec(num_classes=3)
    means = {c: [] for c in range(3)}
    for idx in range(60):
        smp = generate_sample(spec, idx, return_masks=True)
        for cls, mask in zip(smp.classes, smp.masks):
            means[int(cls)].append(smp.image[mask].mean(0))
    centers = np.array([np.mean(means[c], 0) for c in range(3)])
    gaps = [np.abs(centers[i] - centers[j]).max() for i in range(3) for j in range(i + 1, 3)]
    assert min(gaps) > 0.2


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(num_classes=9)
    with pytest.raises(ValueError):
        SceneSpec(min_objects=3, max_objects=2)
    with pytest.raises(ValueError):
        SceneSpec(min_size=60, max_size=200)


def test_splits_are_disjoint_and_ordered():
    spec = SceneSpec(image_size=32, min_size=4, max_size=12)
    tr, va = train_val_datasets(spec, 20, 10)
    assert not set(tr.indices) & set(va.indices)
    again = SyntheticDataset(spec, 20)
    np.testing.assert_array_equal(tr.images, again.images)
    smp = tr[3]
    direct = generate_sample(spec, 3)
    np.testing.assert_array_equal(smp.image, direct.image)


def test_hflip_mirrors_boxes():
    smp = generate_sample(SceneSpec(), 2, return_masks=False)
    f = hflip(smp)
    np.testing.assert_array_equal(f.image, smp.image[:, ::-1])
    np.testing.assert_allclose(hflip(f).boxes, smp.boxes)
    assert (f.boxes[:, 2] > f.boxes[:, 0]).all()


def test_backbone_level_shapes(rng):
    bb = Backbone(8, rng)
    levels = bb(np.zeros((1, 128, 128, 3)))
    assert [lv.shape[1:3] for lv in levels] == [(16, 16), (8, 8), (4, 4)]
    assert all(lv.shape[-1] == 8 for lv in levels)
    big = bb(np.zeros((1, 256, 256, 3)))
    assert [lv.shape[1:3] for lv in big] == [(32, 32), (16, 16), (8, 8)]
    assert bb.level_shapes(128, 128) == [(16, 16), (8, 8), (4, 4)]


def test_backbone_rejects_indivisible_size(rng):
    with pytest.raises(ValueError, match="divisible"):
        Backbone(8, rng)(np.zeros((1, 100, 128, 3)))


def test_backbone_conv_level_gradcheck(rng):
    bb = Backbone(4, rng)
    conv = bb.stem[0]

    def f(x, w, b):
        y = T.relu(T.conv2d(x, w, stride=2, padding=1) + b)
        return T.sum_(y * y)

    def sample(r):
        return [Tensor(r.normal(size=(1, 6, 6, 3))), Tensor(r.normal(size=conv.weight.shape) * 0.5),
                Tensor(r.normal(size=conv.bias.shape) * 0.1)]

    err, n = gradcheck_random(f, sample, rng, points=3)
    assert n == 3 and err <= 1e-4


def _write(tmp_path, obj):
    p = tmp_path / "ann.json"
    p.write_text(json.dumps(obj))
    return p


def test_coco_minimal_file(tmp_path):
    p = _write(tmp_path, {"images": [{"id": 1}], "categories": [{"id": 4, "name": "x"}],
                          "annotations": [{"image_id": 1, "category_id": 4, "bbox": [10, 10, 20, 30]}]})
    ds = load_coco_annotations(p)
    np.testing.assert_array_equal(ds.boxes[1], [[10, 10, 30, 40]])
    np.testing.assert_array_equal(ds.classes[1], [0])


def test_coco_empty_annotations(tmp_path):
    ds = load_coco_annotations(_write(tmp_path, {"images": [{"id": 1}, {"id": 2}], "categories": [], "annotations": []}))
    assert ds.boxes[1].shape == (0, 4) and ds.boxes[2].shape == (0, 4)


def test_coco_category_remap(tmp_path):
    cats = [{"id": 56, "name": "c"}, {"id": 7, "name": "a"}, {"id": 11, "name": "b"}]
    anns = [{"image_id": 1, "category_id": c, "bbox": [0, 0, 1, 1]} for c in (7, 11, 56, 11)]
    ds = load_coco_annotations(_write(tmp_path, {"images": [{"id": 1}], "categories": cats, "annotations": anns}))
    np.testing.assert_array_equal(ds.classes[1], [0, 1, 2, 1])
    assert ds.category_ids() == [7, 11, 56]


def test_coco_missing_field_is_named(tmp_path):
    p = _write(tmp_path, {"images": [{"id": 1}], "categories": [{"id": 1}],
                          "annotations": [{"image_id": 1, "category_id": 1}]})
    with pytest.raises(CocoFormatError, match="'bbox'"):
        load_coco_annotations(p)
    with pytest.raises(CocoFormatError, match="'categories'"):
        load_coco_annotations(_write(tmp_path, {"images": [], "annotations": []}))


def test_coco_degenerate_boxes_skipped(tmp_path, caplog):
    anns = [{"image_id": 1, "category_id": 1, "bbox": b} for b in ([0, 0, 0, 5], [0, 0, 5, -1], [1, 1, 2, 2])]
    with caplog.at_level(logging.WARNING):
        ds = load_coco_annotations(_write(tmp_path, {"images": [{"id": 1}], "categories": [{"id": 1}], "annotations": anns}))
    assert ds.skipped == 2 and len(ds.boxes[1]) == 1
    assert "skipped 2" in caplog.text


def test_coco_export_reload_roundtrip(tmp_path):
    spec = SceneSpec(image_size=64, min_size=6, max_size=20)
    ds = synthetic_to_coco(SyntheticDataset(spec, 15))
    export_coco_annotations(ds, tmp_path / "a.json")
    back = load_coco_annotations(tmp_path / "a.json")
    assert [im["id"] for im in back.images] == [im["id"] for im in ds.images]
    for im in ds.images:
        np.testing.assert_array_equal(back.boxes[im["id"]], ds.boxes[im["id"]])
        np.testing.assert_array_equal(back.classes[im["id"]], ds.classes[im["id"]])
    export_coco_annotations(back, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
