"""Finite-difference gradient suite over every differentiable kernel.

Each kernel is a scalar function of float64 tensors plus a sampler of random
inputs. The end-to-end entry perturbs model parameters directly, checking a
random subset of coordinates from every parameter tensor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import decode_boxes_tensor, generate_anchors, iou_matrix
from .head import FQDetHead, HeadConfig, Transition
from .losses import FocalParams, LossWeights, StageTwoTargets, assemble_losses, giou_loss, l1_box_loss, sigmoid_focal_loss
from .matching import top_k_match
from .msda import MSDeformAttn, SamplingSpec, bilinear_sample
from .tensorcore import GradcheckError, Tensor, gradcheck_random, make, watch_kinks
from .tensorcore import tensor as T


@dataclass
class Kernel:
    name: str
    fn: Callable[..., Tensor]
    sample: Callable[[np.random.Generator], list[Tensor]]
    tol: float = 1e-4


@dataclass
class KernelReport:
    name: str
    max_error: float
    points: int
    tol: float
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.points > 0 and self.max_error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.note})" if self.note else ""
        return f"{status} {self.name:<22} max_rel_err={self.max_error:.3e} points={self.points} tol={self.tol:g}{extra}"


def _n(*shape, scale=1.0):
    return lambda rng: rng.normal(size=shape) * scale


def _inputs(*makers):
    return lambda rng: [Tensor(m(rng)) for m in makers]


def _weighted(x: Tensor) -> Tensor:
    """Scalar readout with fixed pseudo-random weights so every output coordinate matters."""
    w = np.cos(np.arange(x.size, dtype=np.float64) * 0.7 + 0.3).reshape(x.shape)
    return (x * w).sum()


def _positive(*shape):
    return lambda rng: rng.uniform(0.3, 2.0, size=shape)


def _boxes(n):
    def make_boxes(rng):
        xy = rng.uniform(0, 20, size=(n, 2))
        wh = rng.uniform(2, 12, size=(n, 2))
        return np.concatenate([xy, xy + wh], axis=1)
    return make_boxes


def op_kernels() -> list[Kernel]:
    a34, b34 = _n(3, 4), _n(3, 4)
    ks = [
        Kernel("add", lambda a, b: _weighted(a + b), _inputs(a34, _n(4))),
        Kernel("sub", lambda a, b: _weighted(a - b), _inputs(a34, _n(3, 1))),
        Kernel("mul", lambda a, b: _weighted(a * b), _inputs(a34, b34)),
        Kernel("div", lambda a, b: _weighted(a / b), _inputs(a34, _positive(3, 4))),
        Kernel("maximum", lambda a, b: _weighted(T.maximum(a, b)), _inputs(a34, b34)),
        Kernel("minimum", lambda a, b: _weighted(T.minimum(a, b)), _inputs(a34, b34)),
        Kernel("matmul", lambda a, b: _weighted(a @ b), _inputs(_n(2, 3, 4), _n(4, 5))),
        Kernel("power", lambda a: _weighted(a ** 1.7), _inputs(_positive(3, 4))),
        Kernel("exp", lambda a: _weighted(T.exp(a)), _inputs(a34)),
        Kernel("log", lambda a: _weighted(T.log(a)), _inputs(_positive(3, 4))),
        Kernel("sqrt", lambda a: _weighted(T.sqrt(a)), _inputs(_positive(3, 4))),
        Kernel("relu", lambda a: _weighted(T.relu(a)), _inputs(a34)),
        Kernel("abs", lambda a: _weighted(T.absolute(a)), _inputs(a34)),
        Kernel("clamp", lambda a: _weighted(T.clamp(a, -0.5, 0.7)), _inputs(a34)),
        Kernel("sigmoid", lambda a: _weighted(T.sigmoid(a)), _inputs(_n(3, 4, scale=3))),
        Kernel("softplus", lambda a: _weighted(T.softplus(a)), _inputs(_n(3, 4, scale=3))),
        Kernel("tanh", lambda a: _weighted(T.tanh(a)), _inputs(a34)),
        Kernel("sum", lambda a: _weighted(T.sum_(a, axis=1, keepdims=True) ** 2), _inputs(a34)),
        Kernel("mean", lambda a: _weighted(T.mean(a, axis=0) ** 2), _inputs(a34)),
        Kernel("max", lambda a: _weighted(T.max_(a, axis=1)), _inputs(a34)),
        Kernel("reshape_transpose", lambda a: _weighted(T.transpose(T.reshape(a, (2, 6)), (1, 0)) ** 2),
               _inputs(a34)),
        Kernel("concat_stack", lambda a, b: _weighted(T.stack([T.concat([a, b], axis=1), T.concat([b, a], axis=1)]) ** 2),
               _inputs(a34, b34)),
        Kernel("getitem", lambda a: _weighted(a[np.array([0, 2, 0]), 1:] ** 2), _inputs(a34)),
        Kernel("index_select", lambda a: _weighted(T.index_select(a, 0, np.array([[2, 0], [0, 1]])) ** 2),
               _inputs(a34)),
        Kernel("gather", lambda a: _weighted(T.gather(a, 1, np.array([[3, 0], [1, 1], [2, 3]])) ** 2),
               _inputs(a34)),
        Kernel("top_k", lambda a: _weighted(T.top_k(a, 2, axis=1)[0] ** 2), _inputs(a34)),
        Kernel("softmax", lambda a: _weighted(T.softmax(a, axis=-1)), _inputs(a34)),
        Kernel("log_softmax", lambda a: _weighted(T.log_softmax(a, axis=0)), _inputs(a34)),
        Kernel("layer_norm", lambda a, w, b: _weighted(T.layer_norm(a, w, b)), _inputs(_n(3, 5), _n(5), _n(5))),
        Kernel("conv2d", lambda x, w, b: _weighted(T.conv2d(x, w, b, stride=2, padding=1)),
               _inputs(_n(1, 5, 5, 2), _n(3, 3, 2, 3), _n(3))),
        Kernel("where", lambda a, b: _weighted(T.where(np.array([[True, False, True, False]] * 3), a, b) ** 2),
               _inputs(a34, b34)),
    ]
    return ks


def _bilinear(fmap, x, y):
    return _weighted(bilinear_sample(fmap, x, y))


def _msda_kernel() -> Kernel:
    rng0 = np.random.default_rng(7)
    spec = SamplingSpec(heads=2, levels=2, points=2)
    attn = MSDeformAttn(4, spec, rng0, value_dim=3)
    for p in attn.parameters():
        p.data = rng0.normal(size=p.shape) * 0.5
    strides = [4, 8]
    ref = np.array([[[8.0, 9.0, 6.0, 10.0], [14.0, 5.0, 9.0, 7.0]]])

    def fn(query, p0, p1):
        return _weighted(attn(query, [p0, p1], strides, ref))

    return Kernel("msda", fn, _inputs(_n(1, 2, 4), _n(1, 4, 4, 3), _n(1, 2, 2, 3)))


def _transition_kernel() -> Kernel:
    tr = Transition(4, 3, 3, np.random.default_rng(3))
    types = np.array([[0, 2, 2, 1]])

    def fn(feats, nw, nb, w, b):
        tr.norm_weight, tr.norm_bias, tr.weight, tr.bias = nw, nb, w, b
        return _weighted(tr(feats, types))

    return Kernel("transition", fn, _inputs(_n(1, 4, 4), _n(3, 4), _n(3, 4), _n(3, 4, 3), _n(3, 3)))


def loss_kernels() -> list[Kernel]:
    anchors = np.array([[2.0, 3.0, 10.0, 12.0], [5.0, 1.0, 9.0, 20.0], [0.0, 0.0, 16.0, 8.0]])
    target = np.array([[3.0, 2.0, 12.0, 11.0], [6.0, 3.0, 10.0, 17.0], [1.0, 1.0, 12.0, 9.0]])
    labels = np.array([[1, 0, 0], [0, 0, 1], [0, 1, 0], [0, 0, 0]], dtype=float)
    return [
        Kernel("focal", lambda x: sigmoid_focal_loss(x, labels).sum(), _inputs(_n(4, 3, scale=2))),
        Kernel("focal_no_alpha", lambda x: sigmoid_focal_loss(x, labels, FocalParams(None, 1.5)).sum(),
               _inputs(_n(4, 3, scale=2))),
        Kernel("l1_loss", lambda x: l1_box_loss(x, np.zeros((3, 4)), 2.0), _inputs(_n(3, 4))),
        Kernel("giou_loss", lambda b: giou_loss(b, target), lambda rng: [Tensor(_boxes(3)(rng))]),
        Kernel("decode_giou", lambda d: giou_loss(decode_boxes_tensor(d, anchors), target),
               _inputs(_n(3, 4, scale=0.3))),
    ]


def kernels() -> list[Kernel]:
    ks = op_kernels()
    ks.append(Kernel("bilinear_sample", _bilinear,
                     lambda rng: [Tensor(rng.normal(size=(2, 4, 5, 3))), Tensor(rng.uniform(-1.5, 5.5, size=(2, 6))),
                                  Tensor(rng.uniform(-1.5, 4.5, size=(2, 6)))]))
    ks.append(_msda_kernel())
    ks.append(_transition_kernel())
    ks.extend(loss_kernels())
    return ks


def corrupt(kernel: Kernel, factor: float = 1.5) -> Kernel:
    """Same function value, gradient scaled by ``factor``; a negative control for the suite."""
    def fn(*xs):
        out = kernel.fn(*xs)
        return make(out.data, [out], lambda g: (g * factor,), "corrupted")
    return Kernel(kernel.name + "[corrupted]", fn, kernel.sample, kernel.tol)


def run_kernel(k: Kernel, rng: np.random.Generator, points: int = 10) -> KernelReport:
    try:
        err, n = gradcheck_random(k.fn, k.sample, rng, points=points)
    except GradcheckError as exc:
        return KernelReport(k.name, float("inf"), 0, k.tol, str(exc))
    return KernelReport(k.name, err, n, k.tol)


# -- end-to-end micro model ----------------------------------------------------
MICRO_IMAGE = (16, 16)


def micro_head(rng: np.random.Generator) -> FQDetHead:
    cfg = HeadConfig(num_classes=2, backbone_dim=8, dim=8, ffn_dim=16, num_queries=2, layers=1, sa_heads=2,
                     msda_heads=2, msda_points=1, levels=2, k_select=2, k_match=1)
    head = FQDetHead(cfg, rng).astype(np.float64)
    for p in head.parameters():
        p.data = rng.normal(size=p.shape) * 0.4
    return head


def micro_loss(head: FQDetHead, pyramid: list[Tensor], gt_boxes: np.ndarray, gt_classes: np.ndarray,
               query_index: np.ndarray | None = None) -> tuple[Tensor, np.ndarray, float]:
    """Total loss of the micro model, the chosen query indices and the selection score gap.

    The gap between the last selected and the first unselected score bounds how
    far parameters can move before the discrete query choice changes.
    """
    strides = [4, 8]
    anchors = generate_anchors([p.shape[1:3] for p in pyramid], strides, head.cfg.anchor_scales, head.cfg.anchor_ratios)
    out = head(pyramid, strides, anchors, MICRO_IMAGE)
    scores = np.sort(out.selection_logits.data[0])[::-1]
    gap = float(scores[head.cfg.num_queries - 1] - scores[head.cfg.num_queries])
    sel = [top_k_match(iou_matrix(gt_boxes, anchors.boxes), head.cfg.k_select)]
    m2 = top_k_match(iou_matrix(gt_boxes, out.query_anchors[0]), head.cfg.k_match)
    tg = [[StageTwoTargets(m2, out.final.reference_boxes[0], gt_boxes, gt_classes)]]
    losses = assemble_losses(out.selection_logits, sel, [out.final.class_logits], [out.final.deltas], tg,
                             head.cfg.num_classes, LossWeights(1.0, 1.0, 1.0), FocalParams())
    return losses["total"], out.query_index, gap


def end_to_end_check(rng: np.random.Generator, points: int = 10, coords_per_tensor: int = 3,
                     eps: float = 1e-6, max_tries: int = 100) -> KernelReport:
    """Finite differences on every parameter tensor (a random subset of coordinates each) and the pyramid."""
    worst, done, tries = 0.0, 0, 0
    gt_boxes = np.array([[1.0, 2.0, 9.0, 11.0], [6.0, 4.0, 15.0, 12.0]])
    gt_classes = np.array([0, 1])
    while done < points:
        tries += 1
        if tries > max_tries:
            return KernelReport("end_to_end", worst, done, 1e-3, "could not find kink-free points")
        head = micro_head(rng)
        pyramid = [Tensor(rng.normal(size=(1, 4, 4, 8)), requires_grad=True),
                   Tensor(rng.normal(size=(1, 2, 2, 8)), requires_grad=True)]
        with watch_kinks() as kink:
            loss, qidx, gap = micro_loss(head, pyramid, gt_boxes, gt_classes)
        if kink[0] < 1e-4 or gap < 1e-3:
            continue
        loss.backward()
        targets = [(name, p) for name, p in head.named_parameters()] + [(f"pyramid{i}", p) for i, p in enumerate(pyramid)]
        analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for name, p in targets}
        point_worst, stable = 0.0, True
        for name, p in targets:
            flat = p.data.reshape(-1)
            for i in rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False):
                orig = flat[i]
                vals = []
                for step in (eps, -eps):
                    flat[i] = orig + step
                    with T.no_grad():
                        val, q2, _ = micro_loss(head, pyramid, gt_boxes, gt_classes)
                    stable &= bool(np.array_equal(q2, qidx))
                    vals.append(float(val.data))
                flat[i] = orig
                num = (vals[0] - vals[1]) / (2 * eps)
                a = analytic[name].reshape(-1)[i]
                point_worst = max(point_worst, abs(a - num) / max(1.0, abs(num)))
        if not stable:
            continue
        worst = max(worst, point_worst)
        done += 1
    return KernelReport("end_to_end", worst, done, 1e-3)


def run_suite(seed: int = 0, points: int = 10, extra: list[Kernel] | None = None,
              end_to_end: bool = True) -> list[KernelReport]:
    rng = np.random.default_rng(seed)
    reports = [run_kernel(k, rng, points) for k in kernels() + list(extra or [])]
    if end_to_end:
        reports.append(end_to_end_check(rng, points))
    return reports
