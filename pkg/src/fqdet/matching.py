"""Label assignment: static top-k, static absolute thresholds, and Hungarian.

Labels are integers per candidate: a ground-truth index (positive),
``NEGATIVE`` or ``IGNORE``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import giou_matrix, xyxy_to_cwh

NEGATIVE = -1
IGNORE = -2


class MatcherConfigError(ValueError):
    pass


@dataclass
class MatcherConfig:
    scheme: str = "topk"
    k: int = 15
    pos_thr: float = 0.7
    neg_thr: float = 0.3
    cost_cls: float = 2.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0

    def validate(self) -> "MatcherConfig":
        if self.scheme not in ("topk", "absolute", "hungarian"):
            raise MatcherConfigError(f"unknown matching scheme {self.scheme!r}")
        if self.k < 1:
            raise MatcherConfigError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.neg_thr <= self.pos_thr <= 1:
            raise MatcherConfigError(f"need 0 <= neg_thr <= pos_thr <= 1, got {self.neg_thr}, {self.pos_thr}")
        if min(self.cost_cls, self.cost_l1, self.cost_giou) < 0:
            raise MatcherConfigError("cost weights must be non-negative")
        return self


@dataclass
class MatchResult:
    labels: np.ndarray
    num_gt: int

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORE

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    def positives_per_gt(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == g) for g in range(self.num_gt)]


def top_k_match(ious: np.ndarray, k: int) -> MatchResult:
    """Each ground truth claims its k highest-IoU candidates (IoU > 0).

    Within a row ties go to the lower candidate index. A candidate claimed by
    several ground truths goes to the one with the higher IoU (lower index on
    ties); the losing ground truths are not refilled.
    """
    if k <= 0:
        raise MatcherConfigError(f"k must be >= 1, got {k}")
    ious = np.asarray(ious, dtype=np.float64)
    g, n = ious.shape
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    if g == 0 or n == 0:
        return MatchResult(labels, g)
    kk = min(k, n)
    order = np.argsort(-ious, axis=1, kind="stable")[:, :kk]
    claim = np.zeros((g, n), dtype=bool)
    np.put_along_axis(claim, order, True, axis=1)
    claim &= ious > 0
    contested = np.where(claim, ious, -1.0)
    owner = contested.argmax(axis=0)
    has = claim.any(axis=0)
    labels[has] = owner[has]
    return MatchResult(labels, g)


def absolute_match(ious: np.ndarray, pos_thr: float = 0.7, neg_thr: float = 0.3) -> MatchResult:
    """Faster R-CNN thresholds plus the best-candidate-per-ground-truth fallback.

    A forced candidate is labelled with its own argmax ground truth; ground
    truths without any overlapping candidate force nothing.
    """
    if not 0 <= neg_thr <= pos_thr <= 1:
        raise MatcherConfigError(f"need 0 <= neg_thr <= pos_thr <= 1, got {neg_thr}, {pos_thr}")
    ious = np.asarray(ious, dtype=np.float64)
    g, n = ious.shape
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    if g == 0 or n == 0:
        return MatchResult(labels, g)
    best_gt = ious.argmax(axis=0)
    best_iou = ious.max(axis=0)
    labels[best_iou >= neg_thr] = IGNORE
    pos = best_iou >= pos_thr
    labels[pos] = best_gt[pos]
    best_cand = ious.argmax(axis=1)
    forced = best_cand[ious[np.arange(g), best_cand] > 0]
    labels[forced] = best_gt[forced]
    return MatchResult(labels, g)


def linear_sum_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column (rows <= cols).

    Shortest augmenting path with potentials (Kuhn-Munkres), O(n^2 m).
    Returns the column assigned to each row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"cannot assign {n} rows to {m} columns")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            rows[p[j] - 1] = j - 1
    return rows


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """One-to-one assignment minimizing total cost; unassigned queries are negative."""
    cost = np.asarray(cost, dtype=np.float64)
    g, q = cost.shape
    if q < g:
        raise ValueError(f"cannot match {g} ground truths with only {q} queries")
    labels = np.full(q, NEGATIVE, dtype=np.int64)
    cols = linear_sum_assignment(cost)
    labels[cols] = np.arange(g)
    return MatchResult(labels, g)


def build_hungarian_cost(probs: np.ndarray, pred_boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                         image_size: tuple[int, int], w_cls: float = 2.0, w_l1: float = 5.0,
                         w_giou: float = 2.0) -> np.ndarray:
    """G x Q matching cost: -w_cls*p(class) + w_l1*L1(normalized cxcywh) + w_giou*(1 - GIoU).

    ``probs`` is (Q, C) object-class probabilities; boxes are xyxy pixels.
    """
    probs = np.asarray(probs, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    h, w = image_size
    scale = np.array([w, h, w, h], dtype=np.float64)
    cls = -probs[:, np.asarray(gt_classes, dtype=np.int64)].T
    pn = xyxy_to_cwh(pred_boxes) / scale
    gn = xyxy_to_cwh(gt_boxes) / scale
    l1 = np.abs(gn[:, None, :] - pn[None, :, :]).sum(-1)
    gi = giou_matrix(gt_boxes, pred_boxes)
    return w_cls * cls + w_l1 * l1 + w_giou * (1.0 - gi)
