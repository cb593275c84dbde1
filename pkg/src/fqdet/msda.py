"""Multi-scale deformable attention with anchor-box reference frames.

Sampling offsets are expressed in the frame of each query's reference box:
origin at the box center, unit lengths equal to half the box width and height.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensorcore import Linear, Module, Tensor
from .tensorcore import tensor as T


@dataclass(frozen=True)
class SamplingSpec:
    heads: int = 8
    levels: int = 3
    points: int = 4

    def __post_init__(self):
        if min(self.heads, self.levels, self.points) < 1:
            raise ValueError(f"heads, levels and points must be >= 1: {self}")

    def head_dim(self, dim: int) -> int:
        if dim % self.heads:
            raise T.ShapeError("msda", (dim,), detail=f"dim {dim} not divisible by {self.heads} heads")
        return dim // self.heads


def bilinear_sample(fmap: Tensor, x, y) -> Tensor:
    """Bilinearly sample (B, H, W, C) maps at continuous coordinates (B, N).

    Texel (i, j) sits at x = j, y = i. Texels outside the map read as zero.
    Differentiable in the map values and in both coordinates; kinks lie on the
    integer grid lines.
    """
    x = T.as_tensor(x)
    y = T.as_tensor(y)
    if fmap.ndim == 3:
        return bilinear_sample(T.reshape(fmap, (1,) + fmap.shape), T.reshape(x, (1, -1)), T.reshape(y, (1, -1)))[0]
    b, h, w, c = fmap.shape
    if x.shape != y.shape or x.ndim != 2 or x.shape[0] != b:
        raise T.ShapeError("bilinear_sample", fmap.shape, x.shape, y.shape)
    xs, ys = x.data, y.data
    if T._KINK_WATCH is not None:
        T.report_kink(np.abs(xs - np.round(xs)))
        T.report_kink(np.abs(ys - np.round(ys)))
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0).astype(fmap.dtype)
    fy = (ys - y0).astype(fmap.dtype)
    flat = fmap.data.reshape(b * h * w, c)
    base = (np.arange(b) * h * w)[:, None]

    corners = []
    vals = []
    for dy in (0, 1):
        for dx in (0, 1):
            cx = x0 + dx
            cy = y0 + dy
            ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            idx = base + np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
            v = flat[idx] * ok[..., None]
            corners.append((idx, ok))
            vals.append(v)
    wx = (1 - fx, fx)
    wy = (1 - fy, fy)
    weights = [wy[0] * wx[0], wy[0] * wx[1], wy[1] * wx[0], wy[1] * wx[1]]
    out = sum(wt[..., None] * v for wt, v in zip(weights, vals))
    v00, v01, v10, v11 = vals

    def bw(g):
        gmap = gx = gy = None
        if fmap.requires_grad:
            acc = np.zeros_like(flat)
            for (idx, ok), wt in zip(corners, weights):
                contrib = g * (wt * ok)[..., None]
                np.add.at(acc, idx.reshape(-1), contrib.reshape(-1, c))
            gmap = acc.reshape(fmap.shape)
        if x.requires_grad:
            dvx = (v01 - v00) * wy[0][..., None] + (v11 - v10) * wy[1][..., None]
            gx = (g * dvx).sum(-1)
        if y.requires_grad:
            dvy = (v10 - v00) * wx[0][..., None] + (v11 - v01) * wx[1][..., None]
            gy = (g * dvy).sum(-1)
        return gmap, gx, gy

    return T.make(out, (fmap, x, y), bw, "bilinear_sample")


def image_to_level(coord, stride: float):
    """Image pixel coordinate -> grid coordinate of a level with the given stride."""
    return coord * (1.0 / stride) - 0.5


class MSDeformAttn(Module):
    """Cross-attention sampling a learned set of points per head and level.

    ``value_dim`` is the pyramid feature size, ``dim`` the query size.
    Offset and attention-logit projections start at zero, so an untrained
    layer samples every point at the box center with uniform weights.
    """

    def __init__(self, dim: int, spec: SamplingSpec, rng: np.random.Generator, value_dim: int | None = None):
        self.dim = dim
        self.spec = spec
        self.head_dim = spec.head_dim(dim)
        m, l, k = spec.heads, spec.levels, spec.points
        self.sampling_offsets = Linear(dim, m * l * k * 2, rng, zero=True)
        self.attention_logits = Linear(dim, m * l * k, rng, zero=True)
        self.value_proj = Linear(value_dim or dim, dim, rng)
        self.output_proj = Linear(dim, dim, rng)

    def sampling_locations(self, query: Tensor, ref_cwh: np.ndarray) -> Tensor:
        """Image-pixel sampling points, shape (B, Q, M, L, K, 2)."""
        b, q, _ = query.shape
        m, l, k = self.spec.heads, self.spec.levels, self.spec.points
        off = T.reshape(self.sampling_offsets(query), (b, q, m, l, k, 2))
        ref = np.asarray(ref_cwh, dtype=query.dtype).reshape(b, q, 1, 1, 1, 4)
        return off * (0.5 * ref[..., 2:]) + ref[..., :2]

    def attention_weights(self, query: Tensor) -> Tensor:
        b, q, _ = query.shape
        m, l, k = self.spec.heads, self.spec.levels, self.spec.points
        logits = T.reshape(self.attention_logits(query), (b, q, m, l * k))
        return T.reshape(T.softmax(logits, axis=-1), (b, q, m, l, k))

    def forward(self, query: Tensor, pyramid: Sequence[Tensor], strides: Sequence[int], ref_cwh: np.ndarray) -> Tensor:
        """query (B, Q, D); pyramid maps (B, H_l, W_l, D_v); reference boxes (B, Q, 4) cx, cy, w, h."""
        if query.ndim != 3 or query.shape[-1] != self.dim:
            raise T.ShapeError("msda", query.shape, detail=f"expected (B, Q, {self.dim}) queries")
        m, l, k = self.spec.heads, self.spec.levels, self.spec.points
        if len(pyramid) != l or len(strides) != l:
            raise T.ShapeError("msda", *(p.shape for p in pyramid),
                               detail=f"spec has {l} levels, got {len(pyramid)} maps / {len(strides)} strides")
        ref_cwh = np.asarray(ref_cwh)
        b, q, _ = query.shape
        if ref_cwh.shape != (b, q, 4):
            raise T.ShapeError("msda", query.shape, ref_cwh.shape, detail="reference boxes")
        dh = self.head_dim
        loc = self.sampling_locations(query, ref_cwh)
        attn = self.attention_weights(query)
        out = None
        for lvl, (fmap, stride) in enumerate(zip(pyramid, strides)):
            _, h, w, _ = fmap.shape
            v = T.reshape(self.value_proj(fmap), (b, h, w, m, dh))
            v = T.reshape(T.transpose(v, (0, 3, 1, 2, 4)), (b * m, h, w, dh))
            # (B, Q, M, K) -> (B, M, Q, K) -> (B*M, Q*K)
            lx = T.reshape(T.transpose(image_to_level(loc[:, :, :, lvl, :, 0], stride), (0, 2, 1, 3)), (b * m, q * k))
            ly = T.reshape(T.transpose(image_to_level(loc[:, :, :, lvl, :, 1], stride), (0, 2, 1, 3)), (b * m, q * k))
            s = T.reshape(bilinear_sample(v, lx, ly), (b, m, q, k, dh))
            a = T.reshape(T.transpose(attn[:, :, :, lvl, :], (0, 2, 1, 3)), (b, m, q, k, 1))
            part = (s * a).sum(axis=3)
            out = part if out is None else out + part
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, q, self.dim))
        return self.output_proj(out)


def projection_param_count(dim: int, spec: SamplingSpec) -> int:
    """Parameters in the offset and attention-logit projections."""
    n = spec.heads * spec.levels * spec.points
    return (dim + 1) * n * 2 + (dim + 1) * n
