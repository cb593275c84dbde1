"""Synthetic shapes scenes, the stand-in convolutional backbone, and COCO annotation I/O."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensorcore import Conv2d, Module, Tensor
from .tensorcore import tensor as T

log = logging.getLogger(__name__)

SHAPES = ("rectangle", "ellipse", "triangle", "diamond", "cross")
_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.25, 0.75, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.80, 0.25],
    [0.75, 0.30, 0.80],
])
VAL_OFFSET = 1_000_000


@dataclass
class SceneSpec:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 8
    num_classes: int = 3
    min_size: int = 12
    max_size: int = 48
    color_jitter: float = 0.12
    noise: float = 0.08
    max_overlap: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range is invalid")
        if not 2 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("object size range is invalid")

    @property
    def class_names(self) -> list[str]:
        return list(SHAPES[: self.num_classes])


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    boxes: np.ndarray  # (n, 4) xyxy
    classes: np.ndarray  # (n,)
    masks: list[np.ndarray] | None = field(default=None, repr=False)


def _shape_mask(kind: str, cx, cy, w, h, px, py) -> np.ndarray:
    dx = (px - cx) / (0.5 * w)
    dy = (py - cy) / (0.5 * h)
    if kind == "rectangle":
        return (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
    if kind == "ellipse":
        return dx * dx + dy * dy <= 1
    if kind == "triangle":
        t = (dy + 1) / 2  # 0 at the apex, 1 at the base
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1
    if kind == "cross":
        return ((np.abs(dx) <= 1) & (np.abs(dy) <= 0.35)) | ((np.abs(dx) <= 0.35) & (np.abs(dy) <= 1))
    raise ValueError(kind)


def _box_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def generate_sample(spec: SceneSpec, index: int, return_masks: bool = False) -> Sample:
    """Deterministic scene for (spec.seed, index).

    Boxes are the tight pixel-edge bounds of each rendered shape mask; pixel
    (i, j) covers [j, j+1) x [i, i+1). Pixel values are quantized to k/255.
    """
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    py, px = np.mgrid[0:s, 0:s] + 0.5
    gray = rng.uniform(0.35, 0.6)
    img = gray + rng.uniform(-spec.noise, spec.noise, size=(s, s, 3))
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes, classes, masks = [], [], []
    for _ in range(n):
        cls = int(rng.integers(spec.num_classes))
        for _attempt in range(100):
            w = rng.uniform(spec.min_size, spec.max_size)
            h = w * np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
            h = float(np.clip(h, spec.min_size, spec.max_size))
            cx = rng.uniform(w / 2, s - w / 2)
            cy = rng.uniform(h / 2, s - h / 2)
            mask = _shape_mask(SHAPES[cls], cx, cy, w, h, px, py)
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            box = [float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)]
            if all(_box_iou(box, b) <= spec.max_overlap for b in boxes):
                break
        color = np.clip(_COLORS[cls] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
        img[mask] = color + rng.uniform(-spec.noise / 2, spec.noise / 2, size=(int(mask.sum()), 3))
        boxes.append(box)
        classes.append(cls)
        masks.append(mask)
    img = (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)
    return Sample(img, np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(classes, dtype=np.int64),
                  masks if return_masks else None)


def hflip(sample: Sample) -> Sample:
    w = sample.image.shape[1]
    boxes = sample.boxes.copy()
    boxes[:, [0, 2]] = w - sample.boxes[:, [2, 0]]
    return Sample(np.ascontiguousarray(sample.image[:, ::-1]), boxes, sample.classes.copy())


class SyntheticDataset:
    """Materialized scenes ``start .. start+count`` of a spec, held as uint8 images."""

    def __init__(self, spec: SceneSpec, count: int, start: int = 0):
        self.spec = spec
        self.start = start
        self.indices = np.arange(start, start + count)
        self._images = np.empty((count, spec.image_size, spec.image_size, 3), dtype=np.uint8)
        self.boxes: list[np.ndarray] = []
        self.classes: list[np.ndarray] = []
        for i, idx in enumerate(self.indices):
            smp = generate_sample(spec, int(idx))
            self._images[i] = np.round(smp.image * 255).astype(np.uint8)
            self.boxes.append(smp.boxes)
            self.classes.append(smp.classes)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def images(self) -> np.ndarray:
        """All images as (N, S, S, 3) uint8."""
        return self._images

    def __getitem__(self, i: int) -> Sample:
        return Sample(self._images[i].astype(np.float32) / 255, self.boxes[i], self.classes[i])

    def batch(self, items, dtype=np.float32, flips=None) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        images, boxes, classes = [], [], []
        for j, i in enumerate(items):
            smp = self[int(i)]
            if flips is not None and flips[j]:
                smp = hflip(smp)
            images.append(smp.image)
            boxes.append(smp.boxes)
            classes.append(smp.classes)
        return np.stack(images).astype(dtype), boxes, classes


def train_val_datasets(spec: SceneSpec, train_count: int, val_count: int) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Disjoint index ranges: training from 0, validation from a fixed offset."""
    return SyntheticDataset(spec, train_count, 0), SyntheticDataset(spec, val_count, VAL_OFFSET)


class Backbone(Module):
    """Strided 3x3 convolutions standing in for a pretrained pyramid backbone.

    Produces levels ``min_level .. max_level`` (stride 2**level) of ``dim`` channels.
    """

    def __init__(self, dim: int, rng: np.random.Generator, min_level: int = 3, max_level: int = 5):
        if not 3 <= min_level <= max_level:
            raise ValueError("need 3 <= min_level <= max_level")
        self.min_level = min_level
        self.max_level = max_level
        self.stem = [Conv2d(3, 16, 3, rng, stride=2), Conv2d(16, 32, 3, rng, stride=2), Conv2d(32, dim, 3, rng, stride=2)]
        self.p3 = Conv2d(dim, dim, 3, rng)
        self.down = [Conv2d(dim, dim, 3, rng, stride=2) for _ in range(3, max_level)]
        self.dim = dim

    @property
    def strides(self) -> list[int]:
        return [2 ** l for l in range(self.min_level, self.max_level + 1)]

    def level_shapes(self, height: int, width: int) -> list[tuple[int, int]]:
        return [(height // s, width // s) for s in self.strides]

    def forward(self, images) -> list[Tensor]:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise T.ShapeError("backbone", x.shape, detail="expected (B, H, W, 3) images")
        big = 2 ** self.max_level
        if x.shape[1] % big or x.shape[2] % big:
            raise ValueError(f"image size {x.shape[1:3]} not divisible by the largest stride {big}")
        x = x - 0.5
        for conv in self.stem:
            x = T.relu(conv(x))
        x = T.relu(self.p3(x))
        levels = [x]
        for conv in self.down:
            x = T.relu(conv(x))
            levels.append(x)
        return levels[self.min_level - 3:]


# -- COCO annotation files -------------------------------------------------
class CocoFormatError(ValueError):
    pass


@dataclass
class CocoDataset:
    images: list[dict]
    boxes: dict[int, np.ndarray]
    classes: dict[int, np.ndarray]
    categories: list[dict]  # original {id, name}, in contiguous-label order
    skipped: int = 0

    def category_ids(self) -> list[int]:
        return [c["id"] for c in self.categories]


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise CocoFormatError(f"missing required field '{key}' in {where}")
    return obj[key]


def load_coco_annotations(path) -> CocoDataset:
    """Parse a COCO detection annotation file.

    Category ids are remapped to [0, C) in ascending id order; annotations
    with non-positive width or height are skipped and counted.
    """
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise CocoFormatError("top level must be an object")
    images = _require(raw, "images", "file")
    anns = _require(raw, "annotations", "file")
    cats = _require(raw, "categories", "file")
    for c in cats:
        _require(c, "id", "category")
    cats = sorted(cats, key=lambda c: c["id"])
    remap = {c["id"]: i for i, c in enumerate(cats)}
    imgs = []
    for im in images:
        imgs.append({"id": _require(im, "id", "image"), "file_name": im.get("file_name", ""),
                     "width": im.get("width"), "height": im.get("height")})
    boxes = {im["id"]: [] for im in imgs}
    classes = {im["id"]: [] for im in imgs}
    skipped = 0
    for a in anns:
        img_id = _require(a, "image_id", "annotation")
        bbox = _require(a, "bbox", "annotation")
        cat = _require(a, "category_id", "annotation")
        if len(bbox) != 4:
            raise CocoFormatError(f"annotation bbox must have 4 numbers, got {bbox}")
        if cat not in remap:
            raise CocoFormatError(f"annotation refers to unknown category_id {cat}")
        if img_id not in boxes:
            raise CocoFormatError(f"annotation refers to unknown image_id {img_id}")
        x, y, w, h = map(float, bbox)
        if w <= 0 or h <= 0:
            skipped += 1
            continue
        boxes[img_id].append([x, y, x + w, y + h])
        classes[img_id].append(remap[cat])
    if skipped:
        log.warning("skipped %d annotations with non-positive extent", skipped)
    return CocoDataset(
        imgs,
        {k: np.array(v, dtype=np.float64).reshape(-1, 4) for k, v in boxes.items()},
        {k: np.array(v, dtype=np.int64) for k, v in classes.items()},
        [{"id": c["id"], "name": c.get("name", str(c["id"]))} for c in cats],
        skipped,
    )


def export_coco_annotations(ds: CocoDataset, path) -> None:
    anns = []
    ann_id = 1
    for im in ds.images:
        for box, cls in zip(ds.boxes[im["id"]], ds.classes[im["id"]]):
            x1, y1, x2, y2 = (float(v) for v in box)
            anns.append({"id": ann_id, "image_id": im["id"], "category_id": ds.categories[int(cls)]["id"],
                         "bbox": [x1, y1, x2 - x1, y2 - y1], "area": (x2 - x1) * (y2 - y1), "iscrowd": 0})
            ann_id += 1
    out = {"images": ds.images, "annotations": anns, "categories": ds.categories}
    Path(path).write_text(json.dumps(out, indent=1))


def synthetic_to_coco(ds: SyntheticDataset) -> CocoDataset:
    s = ds.spec.image_size
    images = [{"id": int(i), "file_name": f"{int(i):07d}", "width": s, "height": s} for i in ds.indices]
    return CocoDataset(
        images,
        {int(i): ds.boxes[j] for j, i in enumerate(ds.indices)},
        {int(i): ds.classes[j] for j, i in enumerate(ds.indices)},
        [{"id": c, "name": n} for c, n in enumerate(ds.spec.class_names)],
    )


def spec_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
