"""Boxes, overlap metrics, the anchor delta codec and pyramid anchor generation.

Boxes are float arrays with a trailing axis of 4: ``xyxy`` is (x1, y1, x2, y2)
and ``cwh`` is (cx, cy, w, h), both in image pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensorcore import Tensor
from .tensorcore import tensor as T

DELTA_CLAMP = math.log(1000.0 / 16)

RETINANET_SCALES = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
RETINANET_RATIOS = (0.5, 1.0, 2.0)


def xyxy_to_cwh(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return np.stack([b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h], axis=-1)


def cwh_to_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    hw = 0.5 * b[..., 2]
    hh = 0.5 * b[..., 3]
    return np.stack([b[..., 0] - hw, b[..., 1] - hh, b[..., 0] + hw, b[..., 1] + hh], axis=-1)


def box_area(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def _inter_union(a: np.ndarray, b: np.ndarray):
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter, union


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b)). A zero-area union gives 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union = _inter_union(a, b)
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def giou_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union = _inter_union(a, b)
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    hull = wh[..., 0] * wh[..., 1]
    penalty = np.divide(hull - union, hull, out=np.zeros_like(hull), where=hull > 0)
    return iou - penalty


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def giou(a, b) -> float:
    return float(giou_matrix(a, b)[0, 0])


def encode_boxes(boxes, anchors) -> np.ndarray:
    """Faster R-CNN deltas (tx, ty, tw, th) of ``boxes`` relative to ``anchors``."""
    b = xyxy_to_cwh(boxes)
    a = xyxy_to_cwh(anchors)
    if np.any(a[..., 2:] <= 0):
        raise ValueError("anchor with non-positive extent")
    if np.any(b[..., 2:] <= 0):
        raise ValueError("cannot encode a box with non-positive width or height")
    return np.stack([
        (b[..., 0] - a[..., 0]) / a[..., 2],
        (b[..., 1] - a[..., 1]) / a[..., 3],
        np.log(b[..., 2] / a[..., 2]),
        np.log(b[..., 3] / a[..., 3]),
    ], axis=-1)


def decode_boxes(deltas, anchors, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; log-scales clamped, result clipped to the image.

    ``image_size`` is (height, width); ``None`` skips clipping.
    """
    d = np.asarray(deltas, dtype=np.float64)
    a = xyxy_to_cwh(anchors)
    tw = np.minimum(d[..., 2], DELTA_CLAMP)
    th = np.minimum(d[..., 3], DELTA_CLAMP)
    cwh = np.stack([
        d[..., 0] * a[..., 2] + a[..., 0],
        d[..., 1] * a[..., 3] + a[..., 1],
        np.exp(tw) * a[..., 2],
        np.exp(th) * a[..., 3],
    ], axis=-1)
    out = cwh_to_xyxy(cwh)
    if image_size is not None:
        h, w = image_size
        out[..., 0::2] = np.clip(out[..., 0::2], 0, w)
        out[..., 1::2] = np.clip(out[..., 1::2], 0, h)
    return out


def encode_box(box, anchor) -> np.ndarray:
    return encode_boxes(np.asarray(box)[None], np.asarray(anchor)[None])[0]


def decode_box(delta, anchor, image_size=None) -> np.ndarray:
    return decode_boxes(np.asarray(delta)[None], np.asarray(anchor)[None], image_size)[0]


def decode_boxes_tensor(deltas: Tensor, anchors: np.ndarray) -> Tensor:
    """Differentiable decode (no clipping) for box losses computed in pixel space."""
    a = xyxy_to_cwh(anchors).astype(deltas.dtype)
    cx = deltas[..., 0] * a[..., 2] + a[..., 0]
    cy = deltas[..., 1] * a[..., 3] + a[..., 1]
    w = T.exp(T.clamp(deltas[..., 2], hi=DELTA_CLAMP)) * a[..., 2]
    h = T.exp(T.clamp(deltas[..., 3], hi=DELTA_CLAMP)) * a[..., 3]
    return T.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def giou_tensor(a: Tensor, b) -> Tensor:
    """Row-wise GIoU of two (N, 4) xyxy box sets; ``b`` may be a constant array."""
    a, b = T._lift(a, b)
    ax1, ay1, ax2, ay2 = (a[:, i] for i in range(4))
    bx1, by1, bx2, by2 = (b[:, i] for i in range(4))
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    iw = T.relu(T.minimum(ax2, bx2) - T.maximum(ax1, bx1))
    ih = T.relu(T.minimum(ay2, by2) - T.maximum(ay1, by1))
    inter = iw * ih
    union = area_a + area_b - inter
    hw = T.maximum(ax2, bx2) - T.minimum(ax1, bx1)
    hh = T.maximum(ay2, by2) - T.minimum(ay1, by1)
    hull = hw * hh
    return inter / union - (hull - union) / hull


@dataclass
class AnchorSet:
    """Flat anchors over a pyramid, ordered level-major, then row-major grid, then type."""

    shapes: list[tuple[int, int]]
    strides: list[int]
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    base_sizes: list[float]
    boxes: np.ndarray = field(repr=False)
    level_offsets: np.ndarray = field(repr=False)

    @property
    def num_types(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def types(self) -> np.ndarray:
        return np.arange(len(self.boxes)) % self.num_types

    @property
    def levels(self) -> np.ndarray:
        return np.searchsorted(self.level_offsets, np.arange(len(self.boxes)), side="right") - 1

    def location_index(self, flat) -> np.ndarray:
        """Index into the concatenated (level-major, row-major) feature locations."""
        return np.asarray(flat) // self.num_types

    def unravel(self, flat) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        flat = np.asarray(flat)
        if np.any((flat < 0) | (flat >= len(self.boxes))):
            raise IndexError("anchor index out of range")
        level = np.searchsorted(self.level_offsets, flat, side="right") - 1
        rem = flat - self.level_offsets[level]
        a = self.num_types
        widths = np.array([s[1] for s in self.shapes])[level]
        cell, typ = np.divmod(rem, a)
        y, x = np.divmod(cell, widths)
        return level, y, x, typ

    def ravel(self, level, y, x, typ) -> np.ndarray:
        level = np.asarray(level)
        widths = np.array([s[1] for s in self.shapes])[level]
        return self.level_offsets[level] + ((np.asarray(y) * widths + x) * self.num_types + typ)


def anchor_types(scales: Sequence[float], ratios: Sequence[float]) -> list[tuple[float, float]]:
    """(scale, ratio) per anchor type, scale-major."""
    return [(s, r) for s in scales for r in ratios]


def generate_anchors(shapes: Sequence[tuple[int, int]], strides: Sequence[int],
                     scales: Sequence[float] = RETINANET_SCALES, ratios: Sequence[float] = RETINANET_RATIOS,
                     base_sizes: Sequence[float] | None = None) -> AnchorSet:
    """Anchors at cell centers ((x+0.5)*stride, (y+0.5)*stride); ratio is h/w.

    ``base_sizes`` defaults to 4 * stride per level.
    """
    if not shapes:
        raise ValueError("empty pyramid")
    if len(shapes) != len(strides):
        raise ValueError("one stride per pyramid level required")
    if not scales or not ratios:
        raise ValueError("anchor scales and ratios must be non-empty")
    if base_sizes is None:
        base_sizes = [4.0 * s for s in strides]
    types = anchor_types(scales, ratios)
    per_level = []
    offsets = [0]
    for (h, w), stride, base in zip(shapes, strides, base_sizes):
        wh = np.array([[base * s / math.sqrt(r), base * s * math.sqrt(r)] for s, r in types])
        ys, xs = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
        ctr = np.stack([xs, ys], axis=-1).reshape(-1, 1, 2)
        half = 0.5 * wh[None]
        boxes = np.concatenate([ctr - half, ctr + half], axis=-1).reshape(-1, 4)
        per_level.append(boxes)
        offsets.append(offsets[-1] + len(boxes))
    return AnchorSet(list(map(tuple, shapes)), list(strides), tuple(scales), tuple(ratios), list(base_sizes),
                     np.concatenate(per_level), np.array(offsets[:-1]))
