from __future__ import annotations

import numpy as np
import pytest

from fqdet.geometry import xyxy_to_cwh
from fqdet.head import (
    AnchorEncoder,
    DecoderLayer,
    FQDetHead,
    HeadConfig,
    HeadConfigError,
    Transition,
    select_queries,
)
from fqdet.msda import SamplingSpec, projection_param_count
from fqdet.tensorcore import Tensor

# Head parameter count at the full-size configuration (80 classes, D=256, FFN 1024,
# 6 layers, 5 levels, 9 anchor types, 8 heads); recorded from the first build and
# cross-checked against the closed-form count below.
FULL_SIZE_HEAD_PARAMS = {4: 7_124_446, 1: 6_569_326}


def analytic_head_params(cfg: HeadConfig) -> int:
    db, d, f, a, c = cfg.backbone_dim, cfg.dim, cfg.ffn_dim, cfg.num_anchor_types, cfg.num_classes
    hid = db // 4
    lin = lambda i, o: i * o + o
    selector = 2 * db + lin(db, hid) + lin(hid, db) + lin(db, a)
    transition = a * (2 * db + db * d + d)
    encoder = lin(4, d) + lin(d, d)
    layer = (3 * 2 * d + projection_param_count(d, cfg.sampling) + lin(db, d) + lin(d, d)
             + 4 * lin(d, d) + lin(d, f) + lin(f, d))
    heads = lin(d, d) + lin(d, c + 1) + lin(d, d) + lin(d, 4)
    n_heads = cfg.layers if cfg.aux_losses and not cfg.shared_heads else 1
    return selector + transition + encoder + cfg.layers * layer + n_heads * heads


def tiny_cfg(**kw) -> HeadConfig:
    base = dict(num_classes=3, backbone_dim=16, dim=16, ffn_dim=32, num_queries=6, layers=3, sa_heads=2,
                msda_heads=2, msda_points=2, levels=2)
    base.update(kw)
    return HeadConfig(**base)


def run_head(head, rng, batch=1, pyramid=None):
    shapes, strides = [(4, 4), (2, 2)], [8, 16]
    pyramid = pyramid or [Tensor(rng.normal(size=(batch, h, w, head.cfg.backbone_dim))) for h, w in shapes]
    anchors = head.anchors_for(shapes, strides)
    return head(pyramid, strides, anchors, (32, 32)), anchors, pyramid


@pytest.mark.parametrize("points", [4, 1])
def test_full_size_parameter_count(points):
    cfg = HeadConfig(msda_points=points)
    head = FQDetHead(cfg, np.random.default_rng(0))
    assert head.num_parameters() == FULL_SIZE_HEAD_PARAMS[points] == analytic_head_params(cfg)


def test_points_delta_is_projection_delta():
    delta = FULL_SIZE_HEAD_PARAMS[4] - FULL_SIZE_HEAD_PARAMS[1]
    per_layer = projection_param_count(256, SamplingSpec(8, 5, 4)) - projection_param_count(256, SamplingSpec(8, 5, 1))
    assert delta == 6 * per_layer


@pytest.mark.parametrize("kw", [dict(aux_losses=True, shared_heads=False), dict(aux_losses=True), dict(layers=1)])
def test_analytic_count_across_toggles(kw):
    cfg = tiny_cfg(**kw)
    assert FQDetHead(cfg, np.random.default_rng(0)).num_parameters() == analytic_head_params(cfg)


def test_shared_heads_count_independent_of_depth():
    counts = []
    for layers in (1, 4):
        h = FQDetHead(tiny_cfg(layers=layers, aux_losses=True), np.random.default_rng(0))
        counts.append(sum(p.size for hd in h.heads for p in hd.parameters()))
    assert counts[0] == counts[1]


def test_config_validation():
    with pytest.raises(HeadConfigError):
        HeadConfig(ibbr=True, aux_losses=False).validate()
    with pytest.raises(HeadConfigError):
        HeadConfig(num_queries=0).validate()


def test_selector_output_count_and_zero_input(rng):
    head = FQDetHead(tiny_cfg(), rng)
    out, anchors, _ = run_head(head, rng)
    assert out.selection_logits.shape == (1, (16 + 4) * 9) == (1, len(anchors))
    zeros = [Tensor(np.zeros((1, 4, 4, 16))), Tensor(np.zeros((1, 2, 2, 16)))]
    scores = head.selector_forward(zeros).data.reshape(-1, 9)
    np.testing.assert_allclose(scores, np.broadcast_to(head.selector.out.bias.data, scores.shape), atol=1e-12)


def test_duplicated_images_give_identical_scores(rng):
    head = FQDetHead(tiny_cfg(), rng)
    one = [rng.normal(size=(1, 4, 4, 16)), rng.normal(size=(1, 2, 2, 16))]
    pyr = [Tensor(np.concatenate([p, p])) for p in one]
    s = head.selector_forward(pyr).data
    np.testing.assert_array_equal(s[0], s[1])


def test_select_queries(rng):
    s = rng.normal(size=(2, 30))
    np.testing.assert_array_equal(np.sort(select_queries(s, 30), axis=1), np.tile(np.arange(30), (2, 1)))
    np.testing.assert_array_equal(select_queries(-np.arange(10.0)[None], 4), [[0, 1, 2, 3]])
    for _ in range(50):
        s = np.round(rng.normal(size=20), 1)
        got = set(select_queries(s, 7).tolist())
        oracle = set(sorted(range(20), key=lambda i: (-s[i], i))[:7])
        assert got == oracle
    with pytest.raises(ValueError):
        select_queries(s, 21)


def test_transition_counts_and_type_dependence(rng):
    tr = Transition(8, 6, 9, rng)
    assert tr.num_parameters() == 9 * (2 * 8 + 8 * 6 + 6)
    for p in tr.parameters():
        p.data = rng.normal(size=p.shape)
    feat = Tensor(np.repeat(rng.normal(size=(1, 1, 8)), 2, axis=1))
    out = tr(feat, np.array([[0, 5]])).data
    assert not np.allclose(out[0, 0], out[0, 1])
    with pytest.raises(IndexError):
        tr(feat, np.array([[0, 9]]))


def test_anchor_encoding_is_pure_and_distinct(rng):
    enc = AnchorEncoder(8, rng)
    boxes = np.array([[10.0, 12, 8, 8], [30, 5, 16, 4], [10.0, 12, 8, 8]])
    e = enc(boxes, (64, 64)).data
    np.testing.assert_array_equal(e[0], e[2])
    assert not np.allclose(e[0], e[1])
    enc(boxes, (64, 64)).sum().backward()
    assert all(p.grad is not None and np.abs(p.grad).sum() > 0 for p in enc.parameters())


def test_decoder_layer_is_permutation_equivariant(rng):
    cfg = tiny_cfg()
    layer = DecoderLayer(cfg, rng)
    for p in layer.parameters():
        p.data = rng.normal(size=p.shape) * 0.3
    pyramid = [Tensor(rng.normal(size=(1, 4, 4, 16))), Tensor(rng.normal(size=(1, 2, 2, 16)))]
    x = rng.normal(size=(1, 5, 16))
    enc = rng.normal(size=(1, 5, 16))
    ref = np.c_[rng.uniform(4, 28, (5, 2)), rng.uniform(4, 20, (5, 2))][None]
    perm = rng.permutation(5)
    a = layer(Tensor(x), Tensor(enc), pyramid, [8, 16], ref).data
    b = layer(Tensor(x[:, perm]), Tensor(enc[:, perm]), pyramid, [8, 16], ref[:, perm]).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_base_outputs_and_fixed_references(rng):
    head = FQDetHead(tiny_cfg(), rng)
    out, anchors, _ = run_head(head, rng)
    assert len(out.predictions) == 1
    assert out.final.class_logits.shape == (1, 6, 4) and out.final.deltas.shape == (1, 6, 4)
    assert out.features.shape == (1, 6, 16)
    np.testing.assert_array_equal(out.query_anchors[0], anchors.boxes[out.query_index[0]])
    np.testing.assert_array_equal(out.query_types, out.query_index % 9)
    for ref in out.reference_history:
        np.testing.assert_array_equal(ref, out.query_anchors)


def test_fresh_box_head_predicts_anchors(rng):
    head = FQDetHead(tiny_cfg(), rng)
    out, _, _ = run_head(head, rng)
    np.testing.assert_array_equal(out.final.deltas.data, 0.0)


def test_aux_losses_give_one_prediction_per_layer(rng):
    head = FQDetHead(tiny_cfg(aux_losses=True, shared_heads=False), rng)
    out, _, _ = run_head(head, rng)
    assert len(out.predictions) == 3 and len(head.heads) == 3


def test_ibbr_with_zero_box_heads_matches_no_ibbr():
    rng = np.random.default_rng(3)
    a = FQDetHead(tiny_cfg(aux_losses=True), np.random.default_rng(9))
    b = FQDetHead(tiny_cfg(aux_losses=True, ibbr=True), np.random.default_rng(9))
    out_a, _, pyr = run_head(a, rng)
    out_b, _, _ = run_head(b, rng, pyramid=pyr)
    for pa, pb in zip(out_a.predictions, out_b.predictions):
        np.testing.assert_array_equal(pa.class_logits.data, pb.class_logits.data)
        np.testing.assert_array_equal(pa.reference_boxes, pb.reference_boxes)


def test_ibbr_moves_references_without_gradient_path(rng):
    head = FQDetHead(tiny_cfg(aux_losses=True, ibbr=True), rng)
    for hd in head.heads:
        hd.box.fc2.weight.data = rng.normal(size=hd.box.fc2.weight.shape) * 0.1
    out, _, _ = run_head(head, rng)
    assert not np.allclose(out.reference_history[1], out.reference_history[0])
    np.testing.assert_array_equal(out.reference_history[0], out.query_anchors)
    assert all(isinstance(r, np.ndarray) for r in out.reference_history)
    w, h = (xyxy_to_cwh(out.reference_history[-1])[..., 2:] >= 1.0).T
    assert w.all() and h.all()


def test_head_gradients_reach_every_parameter(rng):
    head = FQDetHead(tiny_cfg(layers=1), rng)
    for p in head.parameters():
        p.data = rng.normal(size=p.shape) * 0.3
    out, _, _ = run_head(head, rng)
    (out.final.class_logits.sum() + out.final.deltas.sum() + out.selection_logits.sum()).backward()
    missing = [n for n, p in head.named_parameters() if p.grad is None or not np.abs(p.grad).any()]
    assert missing == []
