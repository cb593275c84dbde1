"""The two-stage query-based detection head.

Stage 1 scores every (feature location, anchor type) pair and keeps the top
``num_queries``. Stage 2 turns each kept feature into a query through an
anchor-type-specific transition network, refines it with decoder layers
(deformable cross-attention around its anchor, self-attention, FFN), and
predicts class logits plus box deltas relative to the anchor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import AnchorSet, cwh_to_xyxy, decode_boxes, generate_anchors, xyxy_to_cwh
from .msda import MSDeformAttn, SamplingSpec
from .tensorcore import MLP, LayerNorm, Linear, Module, Parameter, Tensor
from .tensorcore import tensor as T
from .tensorcore.nn import uniform_init


class HeadConfigError(ValueError):
    pass


@dataclass
class HeadConfig:
    num_classes: int = 80
    backbone_dim: int = 256
    dim: int = 256
    ffn_dim: int = 1024
    num_queries: int = 300
    layers: int = 6
    sa_heads: int = 8
    msda_heads: int = 8
    msda_points: int = 4
    levels: int = 5
    anchor_scales: tuple[float, ...] = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    k_select: int = 5
    k_match: int = 15
    aux_losses: bool = False
    shared_heads: bool = True
    ibbr: bool = False
    prior_prob: float = 0.01

    def validate(self) -> "HeadConfig":
        for name in ("num_classes", "backbone_dim", "dim", "ffn_dim", "num_queries", "layers", "sa_heads",
                     "msda_heads", "msda_points", "levels", "k_select", "k_match"):
            if int(getattr(self, name)) < 1:
                raise HeadConfigError(f"{name} must be a positive integer")
        if self.ibbr and not self.aux_losses:
            raise HeadConfigError("ibbr requires aux_losses (it needs intermediate box predictions)")
        if self.dim % self.sa_heads or self.dim % self.msda_heads:
            raise HeadConfigError("dim must be divisible by the attention head counts")
        if not self.anchor_scales or not self.anchor_ratios:
            raise HeadConfigError("anchor scales and ratios must be non-empty")
        return self

    @property
    def num_anchor_types(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def sampling(self) -> SamplingSpec:
        return SamplingSpec(self.msda_heads, self.levels, self.msda_points)


def _prior_bias(p: float) -> float:
    return -math.log((1 - p) / p)


class Selector(Module):
    """Pre-activation residual bottleneck (4x channel reduction), then one score per anchor type."""

    def __init__(self, dim: int, num_types: int, rng: np.random.Generator, prior_prob: float = 0.01):
        hidden = max(1, dim // 4)
        self.norm = LayerNorm(dim)
        self.reduce = Linear(dim, hidden, rng)
        self.expand = Linear(hidden, dim, rng)
        self.out = Linear(dim, num_types, rng)
        self.out.bias.data[:] = _prior_bias(prior_prob)

    def forward(self, feats: Tensor) -> Tensor:
        h = self.expand(T.relu(self.reduce(T.relu(self.norm(feats)))))
        return self.out(feats + h)


class Transition(Module):
    """One LayerNorm -> ReLU -> Linear network per anchor type, applied by index."""

    def __init__(self, d_in: int, d_out: int, num_types: int, rng: np.random.Generator):
        self.num_types = num_types
        self.norm_weight = Parameter(np.ones((num_types, d_in)))
        self.norm_bias = Parameter(np.zeros((num_types, d_in)))
        self.weight = Parameter(uniform_init(rng, d_in, (num_types, d_in, d_out)))
        self.bias = Parameter(np.zeros((num_types, d_out)))

    def forward(self, feats: Tensor, types) -> Tensor:
        types = np.asarray(types, dtype=np.int64)
        if types.size and (types.min() < 0 or types.max() >= self.num_types):
            raise IndexError(f"anchor type outside [0, {self.num_types})")
        x = T.layer_norm(feats)
        x = x * T.index_select(self.norm_weight, 0, types) + T.index_select(self.norm_bias, 0, types)
        x = T.relu(x)
        w = T.index_select(self.weight, 0, types)  # (..., d_in, d_out)
        y = T.matmul(T.reshape(x, x.shape[:-1] + (1, x.shape[-1])), w)
        return T.reshape(y, y.shape[:-2] + (y.shape[-1],)) + T.index_select(self.bias, 0, types)


class AnchorEncoder(Module):
    """MLP on (cx, cy, w, h) normalized by the image size."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.mlp = MLP(4, dim, dim, rng)

    def forward(self, boxes_cwh: np.ndarray, image_size: tuple[int, int], dtype=np.float64) -> Tensor:
        h, w = image_size
        norm = np.asarray(boxes_cwh) / np.array([w, h, w, h])
        return self.mlp(Tensor(norm.astype(dtype)))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        m = self.heads
        dh = d // m

        def split(t):
            return T.transpose(T.reshape(t, (b, n, m, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        att = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
        out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        return self.o(out)


class DecoderLayer(Module):
    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        d = cfg.dim
        self.norm_ca = LayerNorm(d)
        self.cross_attn = MSDeformAttn(d, cfg.sampling, rng, value_dim=cfg.backbone_dim)
        self.norm_sa = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.sa_heads, rng)
        self.norm_ffn = LayerNorm(d)
        self.ffn = MLP(d, cfg.ffn_dim, d, rng)

    def forward(self, x: Tensor, anchor_enc: Tensor, pyramid, strides, ref_cwh) -> Tensor:
        x = x + self.cross_attn(self.norm_ca(x) + anchor_enc, pyramid, strides, ref_cwh)
        x = x + self.self_attn(self.norm_sa(x) + anchor_enc)
        return x + self.ffn(self.norm_ffn(x))


class PredictionHeads(Module):
    """Class logits (C object classes + non-object, last) and box deltas."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, prior_prob: float = 0.01):
        self.cls = MLP(dim, dim, num_classes + 1, rng)
        self.cls.fc2.bias.data[:] = _prior_bias(prior_prob)
        self.box = MLP(dim, dim, 4, rng, zero_last=True)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.cls(x), self.box(x)


@dataclass
class LayerPrediction:
    class_logits: Tensor  # (B, Q, C+1)
    deltas: Tensor  # (B, Q, 4)
    reference_boxes: np.ndarray  # (B, Q, 4) xyxy the deltas are relative to


@dataclass
class HeadOutput:
    selection_logits: Tensor  # (B, N) over all feature-anchor pairs
    query_index: np.ndarray  # (B, Q) flat anchor indices
    query_types: np.ndarray
    query_anchors: np.ndarray  # (B, Q, 4) xyxy
    predictions: list[LayerPrediction]
    reference_history: list[np.ndarray] = field(default_factory=list)  # xyxy refs used by each layer
    features: Tensor | None = None

    @property
    def final(self) -> LayerPrediction:
        return self.predictions[-1]


def select_queries(scores: np.ndarray, num_queries: int) -> np.ndarray:
    """Indices of the top ``num_queries`` scores per row, ties to the lower flat index."""
    scores = np.asarray(scores)
    if num_queries > scores.shape[-1]:
        raise ValueError(f"cannot select {num_queries} queries from {scores.shape[-1]} candidates")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :num_queries]


class FQDetHead(Module):
    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        a = cfg.num_anchor_types
        self.selector = Selector(cfg.backbone_dim, a, rng, cfg.prior_prob)
        self.transition = Transition(cfg.backbone_dim, cfg.dim, a, rng)
        self.anchor_encoder = AnchorEncoder(cfg.dim, rng)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]
        n_heads = cfg.layers if (cfg.aux_losses and not cfg.shared_heads) else 1
        self.heads = [PredictionHeads(cfg.dim, cfg.num_classes, rng, cfg.prior_prob) for _ in range(n_heads)]

    def anchors_for(self, shapes, strides) -> AnchorSet:
        return generate_anchors(shapes, strides, self.cfg.anchor_scales, self.cfg.anchor_ratios)

    def selector_forward(self, pyramid: list[Tensor]) -> Tensor:
        """(B, sum_l H_l W_l A) logits ordered level-major, row-major, then anchor type."""
        b = pyramid[0].shape[0]
        return T.concat([T.reshape(self.selector(p), (b, -1)) for p in pyramid], axis=1)

    def _predict(self, layer: int, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.heads[layer if len(self.heads) > 1 else 0](x)

    def forward(self, pyramid: list[Tensor], strides: list[int], anchors: AnchorSet,
                image_size: tuple[int, int]) -> HeadOutput:
        cfg = self.cfg
        if len(pyramid) != cfg.levels:
            raise T.ShapeError("head", *(p.shape for p in pyramid), detail=f"configured for {cfg.levels} levels")
        b = pyramid[0].shape[0]
        dtype = pyramid[0].dtype
        scores = self.selector_forward(pyramid)
        if scores.shape[1] != len(anchors):
            raise T.ShapeError("head", scores.shape, (len(anchors),), detail="scores vs anchors")

        idx = select_queries(scores.data, cfg.num_queries)
        types = idx % anchors.num_types
        loc = anchors.location_index(idx)
        flat = T.concat([T.reshape(p, (b, -1, p.shape[-1])) for p in pyramid], axis=1)
        n_loc = flat.shape[1]
        feats = T.index_select(T.reshape(flat, (b * n_loc, -1)), 0, loc + (np.arange(b) * n_loc)[:, None])
        x = self.transition(feats, types)

        q_anchors = anchors.boxes[idx]
        ref = q_anchors
        history = []
        preds = []
        for li, layer in enumerate(self.layers):
            history.append(ref)
            ref_cwh = xyxy_to_cwh(ref)
            enc = self.anchor_encoder(ref_cwh, image_size, dtype)
            x = layer(x, enc, pyramid, strides, ref_cwh)
            if cfg.aux_losses:
                logits, deltas = self._predict(li, x)
                preds.append(LayerPrediction(logits, deltas, ref))
                if cfg.ibbr:
                    ref = _refine(deltas.data, ref, image_size)
        if not cfg.aux_losses:
            logits, deltas = self._predict(0, x)
            preds.append(LayerPrediction(logits, deltas, ref))
        history.append(ref)
        return HeadOutput(scores, idx, types, q_anchors, preds, history, x)


def _refine(deltas: np.ndarray, ref: np.ndarray, image_size) -> np.ndarray:
    """Next reference boxes from a layer's (detached) box prediction.

    Not clipped to the image: anchors may overhang the border, and zero deltas
    must leave the reference exactly where it was.
    """
    boxes = decode_boxes(deltas, ref)
    cwh = xyxy_to_cwh(boxes)
    cwh[..., 2:] = np.maximum(cwh[..., 2:], 1.0)
    return cwh_to_xyxy(cwh)


class Detector(Module):
    """Backbone + head; anchors are cached per input resolution."""

    def __init__(self, backbone, head: FQDetHead):
        self.backbone = backbone
        self.head = head
        self._anchor_cache: dict = {}

    def anchors(self, height: int, width: int) -> AnchorSet:
        key = (height, width)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = self.head.anchors_for(self.backbone.level_shapes(height, width),
                                                            self.backbone.strides)
        return self._anchor_cache[key]

    def forward(self, images) -> HeadOutput:
        images = images if isinstance(images, Tensor) else Tensor(images)
        _, h, w, _ = images.shape
        pyramid = self.backbone(images)
        return self.head(pyramid, self.backbone.strides, self.anchors(h, w), (h, w))

    def parameter_groups(self, slow_mult: float) -> list[dict]:
        """Backbone and MSDA offset projections at ``slow_mult`` x the base rate."""
        slow, fast = [], []
        for name, p in self.named_parameters():
            if name.startswith("backbone.") or ".sampling_offsets." in name:
                slow.append(p)
            else:
                fast.append(p)
        return [{"params": fast, "lr_mult": 1.0}, {"params": slow, "lr_mult": slow_mult}]
