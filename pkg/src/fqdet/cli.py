"""Command-line entry point: train, eval, ablate, bench, gradcheck, gen-data."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigKeyError, RunConfig, load_config
from .data import VAL_OFFSET, SceneSpec, SyntheticDataset, export_coco_annotations, spec_dict, synthetic_to_coco
from .tensorcore import ArchiveError, memory, no_grad, save_archive
from . import train as tr

log = logging.getLogger("fqdet")

# Single-size variants keep the middle of the three default scales.
ONE = (2 ** (1 / 3),)

# Variants per ablation axis: name -> overrides applied on top of the base config.
ABLATIONS: dict[str, list[tuple[str, dict]]] = {
    "anchors": [
        ("sizes1_ratios1", {"head.anchor_scales": ONE, "head.anchor_ratios": (1.0,)}),
        ("sizes1_ratios3", {"head.anchor_scales": ONE}),
        ("sizes3_ratios1", {"head.anchor_ratios": (1.0,)}),
        ("sizes3_ratios3", {}),
    ],
    "boxloss": [
        ("l1", {}),
        ("l1_giou", {"loss.w_cls": 2.0, "loss.w_l1": 5.0, "loss.w_giou": 2.0}),
    ],
    "aux": [
        ("none", {}),
        ("aux_shared", {"head.aux_losses": True, "head.shared_heads": True}),
        ("aux_unshared", {"head.aux_losses": True, "head.shared_heads": False}),
    ],
    "ibbr": [
        ("none", {}),
        ("ibbr_shared", {"head.aux_losses": True, "head.ibbr": True, "head.shared_heads": True}),
        ("ibbr_unshared", {"head.aux_losses": True, "head.ibbr": True, "head.shared_heads": False}),
    ],
    "matching": [
        ("hungarian", {"match.scheme": "hungarian"}),
        ("absolute", {"match.scheme": "absolute"}),
        ("topk", {"match.scheme": "topk"}),
    ],
    "points": [
        ("points4", {"msda.points": 4}),
        ("points1", {"msda.points": 1}),
    ],
    "inference": [
        ("old", {"eval.strategy": "old"}),
        ("new", {"eval.strategy": "new"}),
    ],
}
ABLATION_FIELDS = ("axis", "variant", "overrides", "AP", "AP50", "AP75", "params", "train_seconds", "eval_seconds")


def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


def _echo(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved-config.txt").write_text(cfg.dumps())
    sys.stdout.write(cfg.dumps())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _echo(cfg, out)
    try:
        res = tr.train(cfg, out, resume=args.resume, progress=True)
    except tr.TrainingDiverged as exc:
        log.error("%s", exc)
        return 2
    report = {"config_digest": cfg.digest(), "final": res.metrics[-1] if res.metrics else {},
              "train_seconds": res.train_seconds}
    _write_json(out / "report.json", report)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _echo(cfg, out)
    model = tr.build_model(cfg)
    try:
        meta = tr.load_checkpoint(Path(args.checkpoint), model)
    except (tr.CheckpointMismatch, ArchiveError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    spec = tr.scene_spec(cfg)
    if args.split == "val":
        ds = SyntheticDataset(spec, cfg.data.val_count, start=VAL_OFFSET)
    else:
        ds = SyntheticDataset(spec, cfg.data.train_count)
    t0 = time.perf_counter()
    raw = tr.predict_dataset(model, ds, cfg)
    strategies = ["old", "new"] if args.strategy == "both" else [args.strategy]
    report = {"checkpoint": str(args.checkpoint), "epoch": meta.get("epoch"), "split": args.split}
    for s in strategies:
        report[s] = tr.evaluate(model, ds, cfg, s, raw)
        print(f"{s}: " + " ".join(f"{k}={v:.4f}" for k, v in report[s].items()))
    report["eval_seconds"] = time.perf_counter() - t0
    _write_json(out / "report.json", report)
    return 0


def _format_overrides(ov: dict) -> str:
    parts = []
    for k, v in ov.items():
        v = ",".join(f"{x:.6g}" for x in v) if isinstance(v, tuple) else v
        parts.append(f"{k}={v}")
    return ";".join(parts) or "-"


def run_ablation(axis: str, base: RunConfig, cache_dir: Path, progress: bool = False) -> list[dict]:
    """Train (or reuse) each variant of ``axis`` and evaluate it on the validation split."""
    if axis not in ABLATIONS:
        raise ConfigKeyError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATIONS)}")
    rows = []
    datasets = tr.train_val_datasets(tr.scene_spec(base), base.data.train_count, base.data.val_count)
    raw_cache: dict[str, tuple] = {}
    for name, ov in ABLATIONS[axis]:
        cfg = base.with_overrides(ov).validate()
        res = tr.cached_train(cfg, cache_dir, datasets, progress)
        key = tr.training_key(cfg)
        t0 = time.perf_counter()
        if key not in raw_cache:
            raw_cache[key] = (tr.predict_dataset(res.model, res.val, cfg), time.perf_counter() - t0)
        raw, predict_s = raw_cache[key]
        t1 = time.perf_counter()
        ap = tr.evaluate(res.model, res.val, cfg, cfg.eval.strategy, raw)
        rows.append({"axis": axis, "variant": name, "overrides": _format_overrides(ov),
                     "AP": ap["AP"], "AP50": ap["AP50"], "AP75": ap["AP75"],
                     "params": res.model.num_parameters(), "train_seconds": res.train_seconds,
                     "eval_seconds": predict_s + time.perf_counter() - t1})
        log.info("%s/%s: AP %.4f AP50 %.4f", axis, name, ap["AP"], ap["AP50"])
    return rows


def write_ablation_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in ABLATION_FIELDS})


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _echo(cfg, out)
    rows = run_ablation(args.axis, cfg, Path(args.cache_dir), progress=True)
    write_ablation_csv(out / f"ablate-{args.axis}.csv", rows)
    for r in rows:
        print(f"{r['variant']:<16} AP={r['AP']:.4f} AP50={r['AP50']:.4f} AP75={r['AP75']:.4f} params={r['params']}")
    return 0


def bench(cfg: RunConfig, images: int = 2, image_size: int | None = None, objects: int = 10,
          repeats: int = 5, warmup: int = 1) -> dict:
    """Params, train/inference steps per second (median of ``repeats``) and peak tracked bytes."""
    size = image_size or cfg.data.image_size
    spec = SceneSpec(image_size=size, min_objects=objects, max_objects=objects, num_classes=cfg.data.num_classes,
                     min_size=cfg.data.min_size, max_size=cfg.data.max_size, seed=cfg.data.seed)
    ds = SyntheticDataset(spec, images)
    dtype = np.dtype(cfg.optim.dtype)
    batch, boxes, classes = ds.batch(range(images), dtype)
    model = tr.build_model(cfg)
    opt = tr.AdamW(model.parameter_groups(cfg.optim.slow_mult), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)

    def train_step():
        losses, _ = tr.compute_losses(model, batch, boxes, classes, cfg)
        opt.zero_grad()
        losses["total"].backward()
        opt.step()

    def infer_step():
        with no_grad():
            out = model(batch)
            fin = out.final
            for i in range(images):
                tr.infer_new(fin.class_logits.data[i], fin.deltas.data[i], fin.reference_boxes[i], (size, size))

    res = {"params": model.num_parameters(), "images": images, "image_size": size, "objects": objects}
    for key, step in (("t", train_step), ("i", infer_step)):
        for _ in range(warmup):
            step()
        times = []
        with memory.track() as m:
            for _ in range(repeats):
                t0 = time.perf_counter()
                step()
                times.append(time.perf_counter() - t0)
            res[f"{key}Mem_bytes"] = m.peak
        res[f"{key}FPS"] = 1.0 / float(np.median(times))
    return res


def cmd_bench(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _echo(cfg, out)
    res = bench(cfg, args.images, args.image_size, args.objects, args.repeats)
    for k in ("params", "tFPS", "tMem_bytes", "iFPS", "iMem_bytes"):
        print(f"{k}: {res[k]:.4g}" if isinstance(res[k], float) else f"{k}: {res[k]}")
    _write_json(out / "report.json", res)
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import corrupt, kernels, run_suite

    extra = []
    if args.corrupt:
        byname = {k.name: k for k in kernels()}
        if args.corrupt not in byname:
            log.error("unknown kernel %r", args.corrupt)
            return 2
        extra.append(corrupt(byname[args.corrupt]))
    reports = run_suite(seed=args.seed, points=args.points, extra=extra, end_to_end=not args.skip_end_to_end)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} kernels passed")
    return 1 if failed else 0


def gen_data(cfg: RunConfig, out: Path, count: int | None = None, split: str = "train") -> dict:
    """Materialize a split: image archive, COCO annotations and a manifest."""
    spec = tr.scene_spec(cfg)
    n = count if count is not None else (cfg.data.train_count if split == "train" else cfg.data.val_count)
    start = 0 if split == "train" else VAL_OFFSET
    ds = SyntheticDataset(spec, n, start=start)
    out.mkdir(parents=True, exist_ok=True)
    save_archive(out / f"{split}-images.bin", {"images": ds.images}, {"split": split, "start": start})
    export_coco_annotations(synthetic_to_coco(ds), out / f"{split}-coco.json")
    entries = [{"index": int(idx), "file": f"{int(idx):07d}", "num_objects": int(len(ds.boxes[j])),
                "sha256": hashlib.sha256(ds.images[j].tobytes()).hexdigest()} for j, idx in enumerate(ds.indices)]
    manifest = {"seed": spec.seed, "count": n, "split": split, "spec": spec_dict(spec),
                "categories": [{"id": c, "name": name} for c, name in enumerate(spec.class_names)],
                "entries": entries}
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    (out / f"{split}-manifest.json").write_text(text)
    return {"manifest_sha256": hashlib.sha256(text.encode()).hexdigest(), "count": n}


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    try:
        _echo(cfg, out)
        info = gen_data(cfg, out, args.count, args.split)
    except OSError as exc:
        log.error("cannot write dataset to %s: %s", out, exc)
        return 2
    print(f"{info['count']} samples, manifest sha256 {info['manifest_sha256']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fqdet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("train", help="train backbone + head")
    common(sp, "runs/train")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, "runs/eval")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--strategy", choices=["old", "new", "both"], default="both")
    sp.add_argument("--split", choices=["val", "train"], default="val")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare the variants of one design axis")
    common(sp, "runs/ablate")
    sp.add_argument("axis", choices=sorted(ABLATIONS))
    sp.add_argument("--cache-dir", default="runs/cache", help="trained variants are reused from here")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="parameter count, step throughput and tracked memory")
    common(sp, "runs/bench")
    sp.add_argument("--images", type=int, default=2)
    sp.add_argument("--image-size", type=int, default=None)
    sp.add_argument("--objects", type=int, default=10)
    sp.add_argument("--repeats", type=int, default=5)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable kernel")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--points", type=int, default=10)
    sp.add_argument("--skip-end-to-end", action="store_true")
    sp.add_argument("--corrupt", metavar="KERNEL", help="also run KERNEL with a deliberately wrong gradient")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("gen-data", help="materialize the synthetic dataset")
    common(sp, "runs/data")
    sp.add_argument("--split", choices=["train", "val"], default="train")
    sp.add_argument("--count", type=int, default=None)
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigKeyError as exc:
        log.error("config error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
