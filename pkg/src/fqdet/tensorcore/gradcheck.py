"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, watch_kinks


class GradcheckError(ArithmeticError):
    pass


class KinkError(GradcheckError):
    """The test point sits too close to a non-differentiable point of some op."""


def gradcheck(f: Callable[..., Tensor], point: Tensor | Sequence[Tensor], eps: float = 1e-6,
              kink_tol: float = 1e-4) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``point`` is one tensor or a list of tensors passed positionally to ``f``;
    ``f`` must return a scalar. Raises :class:`KinkError` when any kinked op
    input lies within ``kink_tol`` of its kink.
    """
    pts = [point] if isinstance(point, Tensor) else list(point)
    pts = [Tensor(np.array(p.data, dtype=np.float64), requires_grad=True) for p in pts]

    with watch_kinks() as kink:
        out = f(*pts)
    if out.size != 1:
        raise GradcheckError(f"function must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise GradcheckError("non-finite function value at the test point")
    if kink[0] < kink_tol:
        raise KinkError(f"test point within {kink[0]:.3g} of a kink (tolerance {kink_tol})")
    out.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in pts]

    worst = 0.0
    for pi, p in enumerate(pts):
        flat = p.data.reshape(-1)
        ag = analytic[pi].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _value(f, pts)
            flat[i] = orig - eps
            lo = _value(f, pts)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise GradcheckError(f"non-finite value perturbing input {pi} coordinate {i}")
            num = (hi - lo) / (2 * eps)
            if not np.isfinite(ag[i]):
                raise GradcheckError(f"non-finite analytic gradient at input {pi} coordinate {i}")
            err = abs(ag[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


def _value(f, pts) -> float:
    consts = [Tensor(p.data) for p in pts]
    return float(f(*consts).data)


def gradcheck_random(f: Callable[..., Tensor], sample: Callable[[np.random.Generator], Sequence[Tensor]],
                     rng: np.random.Generator, points: int = 10, max_tries: int = 200, **kw) -> tuple[float, int]:
    """Gradcheck at ``points`` random kink-free points; resamples points near kinks.

    Returns (max relative error, number of points evaluated).
    """
    worst, done, tries = 0.0, 0, 0
    while done < points:
        tries += 1
        if tries > max_tries:
            raise GradcheckError(f"could not find {points} kink-free points in {max_tries} draws")
        try:
            err = gradcheck(f, sample(rng), **kw)
        except KinkError:
            continue
        worst = max(worst, err)
        done += 1
    return worst, done
