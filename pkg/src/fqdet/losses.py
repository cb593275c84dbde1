"""Selection, classification and box-regression losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import decode_boxes_tensor, encode_boxes, giou_tensor
from .matching import IGNORE, MatchResult
from .tensorcore import Tensor
from .tensorcore import tensor as T


class LossInputError(ValueError):
    pass


@dataclass
class FocalParams:
    alpha: float | None = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class LossWeights:
    w_cls: float = 1.0
    w_l1: float = 1.0
    w_giou: float = 0.0

    def __post_init__(self):
        if min(self.w_cls, self.w_l1, self.w_giou) < 0 or max(self.w_cls, self.w_l1, self.w_giou) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")


def sigmoid_focal_loss(logits: Tensor, targets, params: FocalParams = FocalParams()) -> Tensor:
    """Per-element -alpha_t (1 - p_t)^gamma log(p_t), with p = sigmoid(logits).

    Log terms use softplus in logit space, so saturated logits stay finite.
    ``alpha=None`` disables the class-balance factor.
    """
    t = np.asarray(targets, dtype=logits.dtype)
    ce = T.softplus(-logits) * t + T.softplus(logits) * (1.0 - t)
    if params.gamma:
        p = T.sigmoid(logits)
        one_minus_pt = p * (1.0 - 2.0 * t) + t  # == 1 - p_t
        loss = ce * one_minus_pt ** params.gamma if params.gamma != 1 else ce * one_minus_pt
    else:
        loss = ce
    if params.alpha is not None:
        loss = loss * (params.alpha * t + (1.0 - params.alpha) * (1.0 - t))
    return loss


def l1_box_loss(pred: Tensor, target, normalizer: float | None = None) -> Tensor:
    """Sum of |pred - target| over positives and coordinates, divided by the normalizer."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise LossInputError(f"l1_box_loss: prediction {pred.shape} vs target {target.shape}")
    if pred.shape[0] == 0:
        return T.Tensor(np.zeros((), dtype=pred.dtype))
    norm = max(1.0, float(pred.shape[0] if normalizer is None else normalizer))
    return T.absolute(pred - target).sum() * (1.0 / norm)


def giou_loss(pred_boxes: Tensor, target_boxes, normalizer: float | None = None) -> Tensor:
    """Sum of 1 - GIoU over positives divided by the normalizer (the mean by default)."""
    target_boxes = np.asarray(target_boxes, dtype=pred_boxes.dtype)
    if pred_boxes.shape[0] == 0:
        return T.Tensor(np.zeros((), dtype=pred_boxes.dtype))
    norm = max(1.0, float(pred_boxes.shape[0] if normalizer is None else normalizer))
    return (1.0 - giou_tensor(pred_boxes, target_boxes)).sum() * (1.0 / norm)


@dataclass
class StageTwoTargets:
    """Per-image stage-2 assignment for one set of predictions (one decoder layer)."""

    match: MatchResult
    reference_boxes: np.ndarray  # (Q, 4) boxes the deltas are relative to
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    box_targets: np.ndarray = field(init=False)

    def __post_init__(self):
        pos = np.flatnonzero(self.match.positive)
        if len(pos):
            self.box_targets = encode_boxes(self.gt_boxes[self.match.labels[pos]], self.reference_boxes[pos])
        else:
            self.box_targets = np.zeros((0, 4))


def assemble_losses(selection_logits: Tensor, selection_matches: list[MatchResult],
                    class_logits: list[Tensor], deltas: list[Tensor],
                    targets: list[list[StageTwoTargets]], num_classes: int,
                    weights: LossWeights = LossWeights(), focal: FocalParams = FocalParams()) -> dict[str, Tensor]:
    """Named scalar losses and their weighted ``total``.

    ``selection_logits`` is (B, N) over every feature-anchor pair with one
    MatchResult per image. ``class_logits``/``deltas`` hold one (B, Q, C+1) /
    (B, Q, 4) tensor per supervised decoder layer and ``targets[layer][image]``
    the matching assignment. With several layers the stage-2 terms are summed.
    """
    b, n = selection_logits.shape
    if len(selection_matches) != b or any(len(m.labels) != n for m in selection_matches):
        raise LossInputError("selection matches do not line up with selection logits "
                             f"({len(selection_matches)} images for logits {selection_logits.shape})")
    if not (len(class_logits) == len(deltas) == len(targets)):
        raise LossInputError(f"{len(class_logits)} logit sets, {len(deltas)} delta sets, {len(targets)} target sets")

    sel_t = np.stack([m.positive for m in selection_matches]).astype(selection_logits.dtype)
    sel_valid = np.stack([~m.ignored for m in selection_matches]).astype(selection_logits.dtype)
    n_sel = max(1.0, float(sel_t.sum()))
    sel = (sigmoid_focal_loss(selection_logits, sel_t, focal) * sel_valid).sum() * (1.0 / n_sel)

    losses = {"selection": sel}
    cls_total = l1_total = giou_total = None
    for logits, dl, tg in zip(class_logits, deltas, targets):
        bq = logits.shape[:2]
        if len(tg) != bq[0] or any(len(t.match.labels) != bq[1] for t in tg):
            raise LossInputError(f"stage-2 targets do not line up with predictions {logits.shape}")
        if logits.shape[-1] != num_classes + 1:
            raise LossInputError(f"expected {num_classes + 1} class logits, got {logits.shape[-1]}")
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        valid = np.ones(bq, dtype=logits.dtype)
        for i, t in enumerate(tg):
            lab = t.match.labels
            pos = lab >= 0
            onehot[i, np.flatnonzero(pos), t.gt_classes[lab[pos]]] = 1.0
            onehot[i, lab == -1, num_classes] = 1.0
            valid[i, lab == IGNORE] = 0.0
        n_pos = max(1.0, float(sum(t.match.num_positive for t in tg)))
        cls = (sigmoid_focal_loss(logits, onehot, focal) * valid[..., None]).sum() * (1.0 / n_pos)

        bi, qi = _positive_index(tg)
        if len(bi):
            pd = dl[bi, qi]
            tgt = np.concatenate([t.box_targets for t in tg])
            l1 = l1_box_loss(pd, tgt, n_pos)
            if weights.w_giou:
                refs = np.concatenate([t.reference_boxes[t.match.positive] for t in tg])
                gts = np.concatenate([t.gt_boxes[t.match.labels[t.match.positive]] for t in tg])
                gl = giou_loss(decode_boxes_tensor(pd, refs), gts, n_pos)
            else:
                gl = T.Tensor(np.zeros((), dtype=logits.dtype))
        else:
            l1 = T.Tensor(np.zeros((), dtype=logits.dtype))
            gl = T.Tensor(np.zeros((), dtype=logits.dtype))
        cls_total = cls if cls_total is None else cls_total + cls
        l1_total = l1 if l1_total is None else l1_total + l1
        giou_total = gl if giou_total is None else giou_total + gl

    if cls_total is not None:
        losses["classification"] = cls_total
        losses["l1"] = l1_total
        losses["giou"] = giou_total
        total = sel + weights.w_cls * cls_total + weights.w_l1 * l1_total
        if weights.w_giou:
            total = total + weights.w_giou * giou_total
    else:
        total = sel
    losses["total"] = total
    return losses


def _positive_index(targets: list[StageTwoTargets]) -> tuple[np.ndarray, np.ndarray]:
    bi, qi = [], []
    for i, t in enumerate(targets):
        pos = np.flatnonzero(t.match.positive)
        bi.append(np.full(len(pos), i))
        qi.append(pos)
    if not bi:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(bi).astype(np.int64), np.concatenate(qi).astype(np.int64)
