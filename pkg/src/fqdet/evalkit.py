"""Non-maximum suppression, the two inference strategies, and a COCO-style AP evaluator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import decode_boxes, iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, np.inf), "small": (0.0, 32.0 ** 2), "medium": (32.0 ** 2, 96.0 ** 2),
               "large": (96.0 ** 2, np.inf)}


@dataclass
class Detections:
    boxes: np.ndarray  # (n, 4) xyxy
    scores: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))

    def to_coco(self, image_id: int, category_ids=None) -> list[dict]:
        out = []
        for box, score, c in zip(self.boxes, self.scores, self.classes):
            x1, y1, x2, y2 = (float(v) for v in box)
            cat = int(category_ids[int(c)]) if category_ids is not None else int(c)
            out.append({"image_id": int(image_id), "category_id": cat,
                        "bbox": [x1, y1, x2 - x1, y2 - y1], "score": float(score)})
        return out


@dataclass
class GroundTruths:
    boxes: np.ndarray
    classes: np.ndarray


def nms(boxes, scores, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy suppression of boxes overlapping a kept one by IoU > threshold.

    Visit order is descending score, ties to the lower index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes[order], boxes[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive[i + 1:] &= ious[i, i + 1:] <= iou_threshold
    return np.array(keep, dtype=np.int64)


def batched_nms(boxes, scores, classes, iou_threshold: float = 0.5) -> np.ndarray:
    """Class-wise NMS; returned indices are in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    keep = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        keep.append(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    if not keep:
        return np.zeros(0, dtype=np.int64)
    keep = np.concatenate(keep)
    return keep[np.lexsort((keep, -scores[keep]))]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _finish(boxes, scores, classes, iou_threshold, max_dets) -> Detections:
    keep = batched_nms(boxes, scores, classes, iou_threshold)[:max_dets]
    return Detections(boxes[keep], scores[keep], classes[keep].astype(np.int64))


def infer_old(class_logits, deltas, anchors, image_size, iou_threshold: float = 0.5,
              max_dets: int = 100) -> Detections:
    """One label per query: the argmax object class, scored by its sigmoid.

    ``class_logits`` is (Q, C+1) with the non-object logit last.
    """
    logits = np.asarray(class_logits, dtype=np.float64)[:, :-1]
    boxes = decode_boxes(deltas, anchors, image_size)
    cls = logits.argmax(axis=1)
    scores = _sigmoid(logits[np.arange(len(cls)), cls])
    return _finish(boxes, scores, cls, iou_threshold, max_dets)


def infer_new(class_logits, deltas, anchors, image_size, iou_threshold: float = 0.5,
              max_dets: int = 100) -> Detections:
    """Every (query, object class) pair is a candidate with its own sigmoid score."""
    logits = np.asarray(class_logits, dtype=np.float64)[:, :-1]
    q, c = logits.shape
    boxes = decode_boxes(deltas, anchors, image_size)
    cand_boxes = np.repeat(boxes, c, axis=0)
    scores = _sigmoid(logits).reshape(-1)
    classes = np.tile(np.arange(c), q)
    return _finish(cand_boxes, scores, classes, iou_threshold, max_dets)


class EvaluationError(ValueError):
    pass


def _match_image(det_boxes, gt_boxes, gt_ignore, thresholds):
    """COCO greedy matching for one image/class; dets already score-sorted.

    Each detection takes the unmatched ground truth with the highest IoU at or
    above the threshold, preferring non-ignored ground truths (later index on
    IoU ties, as in the reference evaluator). Returns (T, D) matched flags and
    (T, D) ignore flags.
    """
    nt, nd, ng = len(thresholds), len(det_boxes), len(gt_boxes)
    matched = np.zeros((nt, nd), dtype=bool)
    det_ignore = np.zeros((nt, nd), dtype=bool)
    if nd == 0 or ng == 0:
        return matched, det_ignore
    ious = iou_matrix(det_boxes, gt_boxes)
    thr = np.minimum(thresholds, 1 - 1e-10)[:, None]
    taken = np.zeros((nt, ng), dtype=bool)
    rev = slice(None, None, -1)
    for d in range(nd):
        row = ious[d]
        if row.max() < thr.min():
            continue
        cand = ~taken & (row[None, :] >= thr)
        if not cand.any():
            continue
        for pool in (cand & ~gt_ignore[None, :], cand & gt_ignore[None, :]):
            has = pool.any(axis=1) & ~matched[:, d]
            if not has.any():
                continue
            score = np.where(pool, row[None, :], -1.0)[:, rev]
            pick = ng - 1 - score.argmax(axis=1)
            t_idx = np.flatnonzero(has)
            taken[t_idx, pick[t_idx]] = True
            matched[t_idx, d] = True
            det_ignore[t_idx, d] = gt_ignore[pick[t_idx]]
    return matched, det_ignore


def _precision_at_recalls(tp, fp, npig) -> np.ndarray:
    tpc = np.cumsum(tp)
    fpc = np.cumsum(fp)
    rc = tpc / npig
    pr = tpc / np.maximum(tpc + fpc, np.finfo(np.float64).eps)
    env = np.maximum.accumulate(pr[::-1])[::-1] if len(pr) else pr
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    out = np.zeros(len(RECALL_POINTS))
    ok = idx < len(env)
    out[ok] = env[idx[ok]]
    return out


def ap_eval(detections: list[Detections], ground_truths: list[GroundTruths], num_classes: int | None = None,
            max_dets: int = 100, area: str = "all", thresholds=IOU_THRESHOLDS) -> dict[str, float]:
    """COCO-protocol AP averaged over IoU thresholds and classes with ground truth.

    Returns AP, AP50, AP75 (NaN where the threshold is not evaluated).
    """
    if len(detections) != len(ground_truths):
        raise EvaluationError("one detection list per image required")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if num_classes is None:
        seen = [g.classes for g in ground_truths] + [d.classes for d in detections]
        num_classes = int(max((c.max() + 1 for c in seen if len(c)), default=0))
    lo, hi = AREA_RANGES[area]
    per_class = []
    for c in range(num_classes):
        scores, tps, fps, ign = [], [], [], []
        npig = 0
        for det, gt in zip(detections, ground_truths):
            order = np.argsort(-np.asarray(det.scores), kind="stable")[:max_dets]
            sel = order[np.asarray(det.classes)[order] == c]
            gsel = np.asarray(gt.classes) == c
            gboxes = np.asarray(gt.boxes, dtype=np.float64).reshape(-1, 4)[gsel]
            garea = (gboxes[:, 2] - gboxes[:, 0]) * (gboxes[:, 3] - gboxes[:, 1])
            gignore = (garea < lo) | (garea > hi)
            npig += int((~gignore).sum())
            if len(sel) == 0:
                continue
            dboxes = np.asarray(det.boxes, dtype=np.float64)[sel]
            matched, dign = _match_image(dboxes, gboxes, gignore, thresholds)
            darea = (dboxes[:, 2] - dboxes[:, 0]) * (dboxes[:, 3] - dboxes[:, 1])
            out_of_range = (darea < lo) | (darea > hi)
            dign = dign | (~matched & out_of_range[None, :])
            scores.append(np.asarray(det.scores, dtype=np.float64)[sel])
            tps.append(matched & ~dign)
            fps.append(~matched & ~dign)
            ign.append(dign)
        if npig == 0:
            continue
        if scores:
            s = np.concatenate(scores)
            order = np.argsort(-s, kind="mergesort")
            tp = np.concatenate(tps, axis=1)[:, order]
            fp = np.concatenate(fps, axis=1)[:, order]
        else:
            tp = fp = np.zeros((len(thresholds), 0), dtype=bool)
        per_class.append(np.stack([_precision_at_recalls(tp[t], fp[t], npig).mean() for t in range(len(thresholds))]))
    if not per_class:
        raise EvaluationError("no ground truth in any class: AP is undefined")
    table = np.stack(per_class)  # (classes, thresholds)

    def at(thr):
        hit = np.flatnonzero(np.isclose(thresholds, thr))
        return float(table[:, hit[0]].mean()) if len(hit) else float("nan")

    return {"AP": float(table.mean()), "AP50": at(0.5), "AP75": at(0.75)}


def ap_eval_all_areas(detections, ground_truths, num_classes=None, max_dets=100) -> dict[str, float]:
    out = ap_eval(detections, ground_truths, num_classes, max_dets)
    for key, name in (("small", "APs"), ("medium", "APm"), ("large", "APl")):
        try:
            out[name] = ap_eval(detections, ground_truths, num_classes, max_dets, area=key)["AP"]
        except EvaluationError:
            out[name] = float("nan")
    return out
