"""Model construction, target assignment, the training loop and dataset evaluation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Backbone, SceneSpec, SyntheticDataset, train_val_datasets
from .evalkit import Detections, GroundTruths, ap_eval, ap_eval_all_areas, infer_new, infer_old
from .geometry import decode_boxes, iou_matrix
from .head import Detector, FQDetHead, HeadConfig, HeadOutput
from .losses import FocalParams, LossWeights, StageTwoTargets, assemble_losses
from .matching import absolute_match, build_hungarian_cost, hungarian_match, top_k_match
from .tensorcore import AdamW, load_archive, no_grad, save_archive
from .tensorcore import tensor as T

log = logging.getLogger(__name__)

LOSS_TERMS = ("selection", "classification", "l1", "giou", "total")
METRIC_FIELDS = ("epoch", "iteration") + LOSS_TERMS + ("AP", "AP50", "AP75")
TIMING_FIELDS = ("epoch", "iteration", "wall_seconds", "normalized_time")
TRACE_FIELDS = ("epoch", "iteration") + LOSS_TERMS


class TrainingDiverged(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


def head_config(cfg: RunConfig) -> HeadConfig:
    h = cfg.head
    return HeadConfig(
        num_classes=cfg.data.num_classes, backbone_dim=h.backbone_dim, dim=h.dim, ffn_dim=h.ffn_dim,
        num_queries=h.num_queries, layers=h.layers, sa_heads=h.sa_heads, msda_heads=cfg.msda.heads,
        msda_points=cfg.msda.points, levels=cfg.msda.levels, anchor_scales=tuple(h.anchor_scales),
        anchor_ratios=tuple(h.anchor_ratios), k_select=h.k_select, k_match=h.k_match,
        aux_losses=h.aux_losses, shared_heads=h.shared_heads, ibbr=h.ibbr, prior_prob=h.prior_prob,
    )


def scene_spec(cfg: RunConfig) -> SceneSpec:
    d = cfg.data
    return SceneSpec(image_size=d.image_size, min_objects=d.min_objects, max_objects=d.max_objects,
                     num_classes=d.num_classes, min_size=d.min_size, max_size=d.max_size, seed=d.seed)


def build_model(cfg: RunConfig) -> Detector:
    cfg.validate()
    rng = np.random.default_rng(cfg.optim.seed)
    backbone = Backbone(cfg.head.backbone_dim, rng, cfg.head.min_level, cfg.head.max_level)
    head = FQDetHead(head_config(cfg), rng)
    model = Detector(backbone, head)
    return model.astype(np.dtype(cfg.optim.dtype))


# -- targets ---------------------------------------------------------------
def selection_matches(out: HeadOutput, model: Detector, image_hw, gt_boxes, cfg: RunConfig):
    anchors = model.anchors(*image_hw)
    res = []
    for boxes in gt_boxes:
        ious = iou_matrix(boxes, anchors.boxes)
        if cfg.match.scheme == "absolute":
            res.append(absolute_match(ious, cfg.match.pos_thr, cfg.match.neg_thr))
        else:
            res.append(top_k_match(ious, cfg.head.k_select))
    return res


def stage_two_targets(out: HeadOutput, image_hw, gt_boxes, gt_classes, cfg: RunConfig) -> list[list[StageTwoTargets]]:
    """Targets per supervised layer and image.

    Static schemes match ground truths to the selected queries' original
    anchors; Hungarian matching uses each layer's current (detached) predictions.
    """
    per_layer = []
    static = None
    for pred in out.predictions:
        layer_targets = []
        for i, (boxes, classes) in enumerate(zip(gt_boxes, gt_classes)):
            if cfg.match.scheme == "hungarian":
                if len(boxes):
                    logits = pred.class_logits.data[i, :, :-1].astype(np.float64)
                    probs = 1.0 / (1.0 + np.exp(-logits))
                    pb = decode_boxes(pred.deltas.data[i], pred.reference_boxes[i], image_hw)
                    cost = build_hungarian_cost(probs, pb, boxes, classes, image_hw, cfg.match.cost_cls,
                                                cfg.match.cost_l1, cfg.match.cost_giou)
                    m = hungarian_match(cost)
                else:
                    m = hungarian_match(np.zeros((0, len(pred.reference_boxes[i]))))
            else:
                if static is None:
                    static = []
                    for j, b in enumerate(gt_boxes):
                        ious = iou_matrix(b, out.query_anchors[j])
                        if cfg.match.scheme == "absolute":
                            static.append(absolute_match(ious, cfg.match.pos_thr, cfg.match.neg_thr))
                        else:
                            static.append(top_k_match(ious, cfg.head.k_match))
                m = static[i]
            layer_targets.append(StageTwoTargets(m, pred.reference_boxes[i], boxes, classes))
        per_layer.append(layer_targets)
    return per_layer


def compute_losses(model: Detector, images: np.ndarray, gt_boxes, gt_classes, cfg: RunConfig):
    out = model(images)
    hw = images.shape[1:3]
    sel = selection_matches(out, model, hw, gt_boxes, cfg)
    tg = stage_two_targets(out, hw, gt_boxes, gt_classes, cfg)
    focal = FocalParams(cfg.loss.alpha, cfg.loss.gamma)
    weights = LossWeights(cfg.loss.w_cls, cfg.loss.w_l1, cfg.loss.w_giou)
    losses = assemble_losses(out.selection_logits, sel, [p.class_logits for p in out.predictions],
                             [p.deltas for p in out.predictions], tg, cfg.data.num_classes, weights, focal)
    return losses, out


# -- inference / evaluation -------------------------------------------------
@dataclass
class RawPredictions:
    class_logits: list[np.ndarray]
    deltas: list[np.ndarray]
    anchors: list[np.ndarray]
    image_hw: tuple[int, int]

    def detections(self, strategy: str, nms_iou: float = 0.5, max_dets: int = 100) -> list[Detections]:
        fn = infer_new if strategy == "new" else infer_old
        return [fn(l, d, a, self.image_hw, nms_iou, max_dets)
                for l, d, a in zip(self.class_logits, self.deltas, self.anchors)]


def predict_dataset(model: Detector, ds: SyntheticDataset, cfg: RunConfig) -> RawPredictions:
    logits, deltas, anchors = [], [], []
    bs = cfg.eval.batch_size
    dtype = np.dtype(cfg.optim.dtype)
    with no_grad():
        for s in range(0, len(ds), bs):
            images, _, _ = ds.batch(range(s, min(len(ds), s + bs)), dtype)
            out = model(images)
            fin = out.final
            for i in range(len(images)):
                logits.append(fin.class_logits.data[i].astype(np.float64))
                deltas.append(fin.deltas.data[i].astype(np.float64))
                anchors.append(fin.reference_boxes[i])
    size = ds.spec.image_size
    return RawPredictions(logits, deltas, anchors, (size, size))


def ground_truths(ds: SyntheticDataset) -> list[GroundTruths]:
    return [GroundTruths(b, c) for b, c in zip(ds.boxes, ds.classes)]


def evaluate(model: Detector, ds: SyntheticDataset, cfg: RunConfig, strategy: str | None = None,
             raw: RawPredictions | None = None) -> dict[str, float]:
    raw = raw or predict_dataset(model, ds, cfg)
    dets = raw.detections(strategy or cfg.eval.strategy, cfg.eval.nms_iou, cfg.eval.max_dets)
    fn = ap_eval_all_areas if cfg.eval.area_buckets else ap_eval
    return fn(dets, ground_truths(ds), cfg.data.num_classes, cfg.eval.max_dets)


# -- checkpoints -----------------------------------------------------------
def save_checkpoint(path: Path, model: Detector, opt: AdamW | None, cfg: RunConfig, epoch: int, iteration: int) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        tensors.update(opt.state_arrays())
    save_archive(path, tensors, {"epoch": epoch, "iteration": iteration, "config": cfg.dumps()})


def load_checkpoint(path: Path, model: Detector, opt: AdamW | None = None) -> dict:
    arrays, meta = load_archive(path)
    state = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    try:
        model.load_state_dict(state)
    except (KeyError, T.ShapeError) as exc:
        raise CheckpointMismatch(f"{path}: checkpoint does not fit the configured model: {exc}") from None
    if opt is not None:
        opt.load_state_arrays(arrays)
    return meta


# -- training ----------------------------------------------------------------
def lr_factor(epoch: int, cfg: RunConfig) -> float:
    """Step schedule: multiply by drop_factor after each drop point (fractions of the run)."""
    f = 1.0
    for frac in cfg.optim.drop_fracs:
        if epoch >= round(frac * cfg.optim.epochs):
            f *= cfg.optim.drop_factor
    return f


def _clip_grads(params, max_norm: float) -> None:
    total = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in header])


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class TrainResult:
    model: Detector
    metrics: list[dict]
    run_dir: Path
    val: SyntheticDataset
    train_seconds: float
    trace: list[dict] = field(default_factory=list)


def train(cfg: RunConfig, run_dir: str | Path, resume: bool = False, datasets=None,
          progress: bool = False) -> TrainResult:
    """Train backbone + head; writes checkpoints and three CSVs into ``run_dir``.

    metrics.csv has one row per evaluation (epoch-mean losses, AP) and
    losses.csv one row per iteration. Both are deterministic; wall-clock
    columns live in timing.csv so identical runs give identical files.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved-config.txt").write_text(cfg.dumps())
    train_ds, val_ds = datasets or train_val_datasets(scene_spec(cfg), cfg.data.train_count, cfg.data.val_count)
    dtype = np.dtype(cfg.optim.dtype)
    model = build_model(cfg)
    opt = AdamW(model.parameter_groups(cfg.optim.slow_mult), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    base_lrs = cfg.optim.lr

    start_epoch, iteration = 0, 0
    metrics: list[dict] = []
    timing: list[dict] = []
    trace: list[dict] = []
    last = run_dir / "last.ckpt"
    if resume and last.exists():
        meta = load_checkpoint(last, model, opt)
        start_epoch, iteration = int(meta["epoch"]) + 1, int(meta["iteration"])
        metrics = [r for r in _read_csv(run_dir / "metrics.csv") if int(r["epoch"]) <= start_epoch - 1]
        timing = [r for r in _read_csv(run_dir / "timing.csv") if int(r["epoch"]) <= start_epoch - 1]
        trace = [r for r in _read_csv(run_dir / "losses.csv") if int(r["iteration"]) <= iteration]
        log.info("resumed from epoch %d, iteration %d", start_epoch - 1, iteration)

    bs = cfg.optim.batch_size
    n = len(train_ds)
    epoch_times = []
    elapsed = float(timing[-1]["wall_seconds"]) if timing else 0.0
    for epoch in range(start_epoch, cfg.optim.epochs):
        opt.lr = base_lrs * lr_factor(epoch, cfg)
        erng = np.random.default_rng([cfg.optim.seed, epoch])
        order = erng.permutation(n)
        flips = erng.random(n) < 0.5 if cfg.data.flip else np.zeros(n, dtype=bool)
        sums = {k: 0.0 for k in LOSS_TERMS}
        count = 0
        t0 = time.perf_counter()
        for s in range(0, n, bs):
            if cfg.optim.max_iters and iteration >= cfg.optim.max_iters:
                break
            items = order[s:s + bs]
            images, boxes, classes = train_ds.batch(items, dtype, flips[s:s + bs])
            losses, _ = compute_losses(model, images, boxes, classes, cfg)
            total = losses["total"]
            if not np.isfinite(total.data).all():
                raise TrainingDiverged(f"non-finite loss at iteration {iteration}; last good checkpoint: {last}")
            opt.zero_grad()
            total.backward()
            if cfg.optim.grad_clip > 0:
                _clip_grads(opt.params, cfg.optim.grad_clip)
            opt.step()
            iteration += 1
            count += 1
            step = {"epoch": epoch, "iteration": iteration}
            for k in LOSS_TERMS:
                step[k] = float(losses[k].data) if k in losses else 0.0
                sums[k] += step[k]
            trace.append(step)
            if progress and iteration % 50 == 0:
                log.info("epoch %d iter %d total %.4f", epoch, iteration, float(total.data))
        dt = time.perf_counter() - t0
        epoch_times.append(dt)
        elapsed += dt
        save_checkpoint(run_dir / f"epoch{epoch:03d}.ckpt", model, opt, cfg, epoch, iteration)
        save_checkpoint(last, model, opt, cfg, epoch, iteration)
        _write_csv(run_dir / "losses.csv", TRACE_FIELDS, trace)
        if (epoch + 1) % cfg.eval.interval == 0 or epoch == cfg.optim.epochs - 1:
            ap = evaluate(model, val_ds, cfg)
            row = {"epoch": epoch, "iteration": iteration}
            row.update({k: sums[k] / max(count, 1) for k in LOSS_TERMS})
            row.update({k: ap[k] for k in ("AP", "AP50", "AP75")})
            metrics.append(row)
            unit = float(np.mean(epoch_times))
            timing.append({"epoch": epoch, "iteration": iteration, "wall_seconds": elapsed,
                           "normalized_time": elapsed / unit if unit > 0 else 0.0})
            _write_csv(run_dir / "metrics.csv", METRIC_FIELDS, metrics)
            _write_csv(run_dir / "timing.csv", TIMING_FIELDS, timing)
            log.info("epoch %d: loss %.4f AP %.4f AP50 %.4f (%.1fs)", epoch, row["total"], ap["AP"], ap["AP50"], dt)
        if cfg.optim.max_iters and iteration >= cfg.optim.max_iters:
            break
    return TrainResult(model, metrics, run_dir, val_ds, elapsed, trace)


def training_key(cfg: RunConfig) -> str:
    """Digest of everything that affects training; evaluation-only keys are excluded."""
    neutral = cfg.with_overrides({"eval.strategy": "old", "eval.area_buckets": False})
    return neutral.digest()


def cached_train(cfg: RunConfig, cache_dir: str | Path, datasets=None, progress: bool = False) -> TrainResult:
    """Train once per distinct training configuration; later calls reload the final checkpoint."""
    run_dir = Path(cache_dir) / training_key(cfg)
    last = run_dir / "last.ckpt"
    if last.exists():
        _, meta = load_archive(last)
        done = int(meta["epoch"]) == cfg.optim.epochs - 1 or (
            cfg.optim.max_iters and int(meta["iteration"]) >= cfg.optim.max_iters)
        if done:
            model = build_model(cfg)
            load_checkpoint(last, model)
            train_ds, val_ds = datasets or train_val_datasets(scene_spec(cfg), cfg.data.train_count, cfg.data.val_count)
            timing = _read_csv(run_dir / "timing.csv")
            seconds = float(timing[-1]["wall_seconds"]) if timing else float("nan")
            return TrainResult(model, _read_csv(run_dir / "metrics.csv"), run_dir, val_ds, seconds,
                               _read_csv(run_dir / "losses.csv"))
    return train(cfg, run_dir, resume=True, datasets=datasets, progress=progress)
