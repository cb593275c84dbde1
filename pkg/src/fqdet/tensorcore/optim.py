"""AdamW with decoupled weight decay and per-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One AdamW update. Returns new parameter arrays and the advanced state.

    The decay term ``lr * weight_decay * p`` is applied to the parameter directly,
    never folded into the gradient.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise ConfigError(f"moment shape {m.shape} does not match parameter {p.shape}")
    b1, b2 = betas
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        new = p * (1.0 - lr * weight_decay)
        new = new - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out.append(new.astype(p.dtype, copy=False))
    state.step = step
    return out, state


class AdamW:
    """Stateful wrapper around :func:`adamw_step` over parameter groups.

    Each group is a dict with ``params`` and an ``lr_mult`` scaling the base rate.
    """

    def __init__(self, groups: list[dict], lr: float, betas=(0.9, 0.999), weight_decay: float = 1e-4,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.groups = [dict(g, lr_mult=g.get("lr_mult", 1.0)) for g in groups]
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.states = [AdamState() for _ in self.groups]

    @property
    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for g, st in zip(self.groups, self.states):
            ps = g["params"]
            new, _ = adamw_step([p.data for p in ps], [p.grad for p in ps], st,
                                self.lr * g["lr_mult"], self.betas, self.weight_decay, self.eps)
            for p, arr in zip(ps, new):
                p.data = arr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for gi, st in enumerate(self.states):
            out[f"opt.{gi}.step"] = np.array([st.step], dtype=np.float64)
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                out[f"opt.{gi}.m.{i}"] = m
                out[f"opt.{gi}.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for gi, (g, st) in enumerate(zip(self.groups, self.states)):
            key = f"opt.{gi}.step"
            if key not in arrays:
                continue
            st.step = int(arrays[key][0])
            n = len(g["params"])
            st.m = [np.array(arrays[f"opt.{gi}.m.{i}"]) for i in range(n)] if st.step else []
            st.v = [np.array(arrays[f"opt.{gi}.v.{i}"]) for i in range(n)] if st.step else []
