"""Run configuration: flat ``section.key = value`` text with typed sections.

Defaults are the desk-scale setup; :func:`full_size_overrides` gives the full-size
head used for parameter counting.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigKeyError(KeyError):
    pass


@dataclass
class HeadSection:
    dim: int = 64
    ffn_dim: int = 256
    num_queries: int = 50
    layers: int = 2
    sa_heads: int = 8
    backbone_dim: int = 64
    min_level: int = 3
    max_level: int = 5
    anchor_scales: tuple = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    k_select: int = 5
    k_match: int = 15
    aux_losses: bool = False
    shared_heads: bool = True
    ibbr: bool = False
    prior_prob: float = 0.01


@dataclass
class MsdaSection:
    heads: int = 8
    levels: int = 3
    points: int = 4


@dataclass
class MatchSection:
    scheme: str = "topk"
    pos_thr: float = 0.7
    neg_thr: float = 0.3
    cost_cls: float = 2.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0


@dataclass
class LossSection:
    alpha: float = 0.25
    gamma: float = 2.0
    w_cls: float = 1.0
    w_l1: float = 1.0
    w_giou: float = 0.0


@dataclass
class DataSection:
    seed: int = 0
    train_count: int = 2000
    val_count: int = 500
    image_size: int = 128
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 8
    min_size: int = 12
    max_size: int = 48
    flip: bool = True


@dataclass
class OptimSection:
    lr: float = 1e-4
    slow_mult: float = 0.1
    weight_decay: float = 1e-4
    epochs: int = 12
    batch_size: int = 8
    drop_fracs: tuple = (0.75, 11 / 12)
    drop_factor: float = 0.1
    grad_clip: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    max_iters: int = 0


@dataclass
class EvalSection:
    strategy: str = "old"
    nms_iou: float = 0.5
    max_dets: int = 100
    interval: int = 1
    area_buckets: bool = False
    batch_size: int = 25


@dataclass
class RunConfig:
    head: HeadSection = field(default_factory=HeadSection)
    msda: MsdaSection = field(default_factory=MsdaSection)
    match: MatchSection = field(default_factory=MatchSection)
    loss: LossSection = field(default_factory=LossSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- flat key access --------------------------------------------------
    def to_flat(self) -> dict[str, object]:
        out = {}
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                out[f"{sec.name}.{f.name}"] = getattr(obj, f.name)
        return out

    def set(self, key: str, value) -> None:
        try:
            sec_name, name = key.split(".", 1)
        except ValueError:
            raise ConfigKeyError(f"config key must look like section.name: {key!r}") from None
        if sec_name not in {f.name for f in fields(self)}:
            raise ConfigKeyError(f"unknown config section in {key!r}")
        sec = getattr(self, sec_name)
        ftypes = {f.name: f for f in fields(sec)}
        if name not in ftypes:
            raise ConfigKeyError(f"unknown config key {key!r}")
        current = getattr(sec, name)
        setattr(sec, name, _coerce(value, current, key))

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        cfg = dataclasses.replace(self, **{f.name: dataclasses.replace(getattr(self, f.name)) for f in fields(self)})
        for k, v in overrides.items():
            cfg.set(k, v)
        return cfg

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_flat().items())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        levels = self.head.max_level - self.head.min_level + 1
        if self.msda.levels != levels:
            raise ConfigKeyError(f"msda.levels={self.msda.levels} but the pyramid has {levels} levels")
        if self.match.scheme not in ("topk", "absolute", "hungarian"):
            raise ConfigKeyError(f"match.scheme must be topk, absolute or hungarian, got {self.match.scheme!r}")
        if self.eval.strategy not in ("old", "new"):
            raise ConfigKeyError(f"eval.strategy must be old or new, got {self.eval.strategy!r}")
        if self.optim.dtype not in ("float32", "float64"):
            raise ConfigKeyError("optim.dtype must be float32 or float64")
        return self


def _coerce(value, current, key):
    if not isinstance(value, str):
        if isinstance(current, tuple):
            return tuple(float(v) for v in value)
        return type(current)(value)
    text = value.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigKeyError(f"bad value {value!r} for {key} (expected {type(current).__name__})") from None
    return text


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base.with_overrides({}) if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = parse_config_text(Path(path).read_text()) if path else RunConfig()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigKeyError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg.validate()


def full_size_overrides() -> dict[str, object]:
    """Full-size head settings (COCO classes, P3-P7, 256-d, 6 layers, 300 queries)."""
    return {
        "head.dim": 256, "head.ffn_dim": 1024, "head.num_queries": 300, "head.layers": 6,
        "head.backbone_dim": 256, "head.min_level": 3, "head.max_level": 7, "msda.levels": 5,
        "msda.heads": 8, "msda.points": 4, "data.num_classes": 80,
    }
