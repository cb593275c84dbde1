"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records its parents and a closure mapping the output
gradient to parent gradients. Nodes carry a monotonically increasing sequence
number, so sorting the reachable graph by that number replays the tape in exact
reverse execution order.
"""
from __future__ import annotations

import contextlib
import itertools
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

_SEQ = itertools.count()
_GRAD_ENABLED = True
_KINK_WATCH: list[float] | None = None
_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class MemoryTracker:
    """Allocator-side accounting of live tensor bytes (a proxy, not OS RSS)."""

    def __init__(self):
        self.enabled = False
        self.live = 0
        self.peak = 0

    def _alloc(self, t: "Tensor") -> None:
        n = t.data.nbytes
        self.live += n
        if self.live > self.peak:
            self.peak = self.live
        weakref.finalize(t, self._free, n)

    def _free(self, n: int) -> None:
        self.live -= n

    @contextlib.contextmanager
    def track(self):
        """Enable tracking and reset the peak to the current live size."""
        prev = self.enabled
        self.enabled = True
        self.peak = self.live
        try:
            yield self
        finally:
            self.enabled = prev


memory = MemoryTracker()


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def watch_kinks():
    """Collect the distance of every non-smooth op input to its nearest kink."""
    global _KINK_WATCH
    prev = _KINK_WATCH
    _KINK_WATCH = [np.inf]
    try:
        yield _KINK_WATCH
    finally:
        _KINK_WATCH = prev


def report_kink(distance) -> None:
    if _KINK_WATCH is not None:
        d = np.asarray(distance)
        if d.size:
            _KINK_WATCH[0] = min(_KINK_WATCH[0], float(np.min(d)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_SEQ)
        self.op = "leaf"
        self.name = name
        if memory.enabled:
            memory._alloc(self)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None, retain_graph: bool = False,
                 visit: Callable[["Tensor"], None] | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", self.shape, detail="implicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError("backward", self.shape, grad.shape)

        nodes = _reachable(self)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        pending = {id(self): grad}
        for node in nodes:
            g = pending.pop(id(node), None)
            if visit is not None:
                visit(node)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _reachable(root: Tensor) -> list[Tensor]:
    seen = set()
    out = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Wrap python/numpy operands as constants matching the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Create an op output and, when any parent needs gradients, record it on the tape."""
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("add", a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), bw, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``. Kink at a == b."""
    a, b = _lift(a, b)
    _check_broadcast("maximum", a, b)
    report_kink(np.abs(a.data - b.data))
    pick_a = a.data >= b.data

    def bw(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return make(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``. Kink at a == b."""
    a, b = _lift(a, b)
    _check_broadcast("minimum", a, b)
    report_kink(np.abs(a.data - b.data))
    pick_a = a.data <= b.data

    def bw(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return make(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make(a.data @ b.data, (a, b), bw, "matmul")


# -- elementwise unary ----------------------------------------------------
def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    report_kink(np.abs(a.data))
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def absolute(a: Tensor) -> Tensor:
    report_kink(np.abs(a.data))
    sign = np.sign(a.data)
    return make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient is zero outside. Kinks at the bounds."""
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        report_kink(np.abs(a.data - lo))
        mask &= a.data >= lo
    if hi is not None:
        report_kink(np.abs(a.data - hi))
        mask &= a.data <= hi
    return make(out, (a,), lambda g: (g * mask,), "clamp")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return make(out, (a,), bw, "softplus")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# -- reductions -----------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / max(n, 1))


def max_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element."""
    axes = _norm_axis(axis, a.ndim)
    tail = tuple(range(-len(axes), 0))
    moved = np.moveaxis(a.data, axes, tail)
    lead = moved.shape[: moved.ndim - len(axes)]
    flat = moved.reshape(*lead, -1)
    arg = flat.argmax(axis=-1)
    if _KINK_WATCH is not None and flat.shape[-1] > 1:
        srt = np.sort(flat, axis=-1)
        report_kink(srt[..., -1] - srt[..., -2])
    mask = np.zeros_like(flat, dtype=bool)
    np.put_along_axis(mask, arg[..., None], True, axis=-1)
    mask = np.moveaxis(mask.reshape(moved.shape), tail, axes)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * mask,)

    return make(np.asarray(out), (a,), bw, "max")


# -- shape ops ------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"axes {axes}")
    inv = tuple(np.argsort(axes))
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in tensors]) from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make(out, tensors, bw, "stack")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make(np.array(out, copy=True) if basic else out, (a,), bw, "getitem")


def _is_basic_index(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in idx)


def index_select(a: Tensor, axis: int, index) -> Tensor:
    """Rows of ``a`` along ``axis`` picked by an integer array (any shape)."""
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ShapeError("index_select", a.shape, index.shape, detail="index out of range")
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (full,)

    return make(out, (a,), bw, "index_select")


def gather(a: Tensor, axis: int, index) -> Tensor:
    """take_along_axis with gradient scatter."""
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    try:
        out = np.take_along_axis(a.data, index, axis=axis)
    except (ValueError, IndexError):
        raise ShapeError("gather", a.shape, index.shape) from None

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        grids = list(np.indices(index.shape, sparse=True))
        grids[axis] = index
        np.add.at(full, tuple(grids), g)
        return (full,)

    return make(out, (a,), bw, "gather")


def top_k(a: Tensor, k: int, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Largest ``k`` entries along ``axis`` (ties to lower index), with their indices."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if not 1 <= k <= n:
        raise ShapeError("top_k", a.shape, detail=f"k={k}")
    order = np.argsort(-a.data, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    if _KINK_WATCH is not None and k < n:
        vals = np.sort(a.data, axis=axis)
        kth = np.take(vals, n - k, axis=axis)
        nxt = np.take(vals, n - k - 1, axis=axis)
        report_kink(kth - nxt)
    return gather(a, axis, idx), idx


# -- composite ops --------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make(out, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; eps sits inside the square root."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    out = make(xhat, (a,), bw, "layer_norm")
    if weight is not None:
        if weight.shape[-1] != n:
            raise ShapeError("layer_norm", a.shape, weight.shape)
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on NHWC input with an (kh, kw, C_in, C_out) kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, h, wd, _ = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail="output would be empty")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + span_h:stride, j:j + span_w:stride, :] @ w.data[i, j]

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + span_h:stride, j:j + span_w:stride, :] += g @ w.data[i, j].T
            gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        if w.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, i:i + span_h:stride, j:j + span_w:stride, :].reshape(-1, w.shape[2])
                    gw[i, j] = patch.T @ g2
        return gx, gw

    y = make(out, (x, w), bw, "conv2d")
    if b is not None:
        y = y + b
    return y


def where(cond, a, b) -> Tensor:
    a, b = _lift(a, b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return unbroadcast(np.where(cond, g, 0), a.shape), unbroadcast(np.where(cond, 0, g), b.shape)

    return make(np.where(cond, a.data, b.data), (a, b), bw, "where")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
