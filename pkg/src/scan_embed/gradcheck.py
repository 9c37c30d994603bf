"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .numerics import ContractError, Tensor, no_grad, zero_grad


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    h: float
    tolerance: float
    coords_checked: dict[str, int]
    seed: int | None = None
    worst: dict[str, tuple[int, float, float]] = field(default_factory=dict)

    @property
    def overall_max(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.overall_max <= self.tolerance


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    seed: int | None = 0,
) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current ``params`` on each call.
    Parameters with more than ``max_coords`` entries are checked on a random
    subset of coordinates drawn with ``seed``.
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"step size h must lie in (0, 1e-2], got {h}")
    plist = list(params.values())
    zero_grad(plist)
    out = fn()
    if out.size != 1:
        raise ContractError(f"finite_difference_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
    zero_grad(plist)

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    worst: dict[str, tuple[int, float, float]] = {}
    for name, p in params.items():
        n = p.size
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        base = p.data.copy()
        flat_grad = analytic[name].reshape(-1)
        numeric = np.empty(len(coords))
        with no_grad():
            for j, c in enumerate(coords):
                bumped = base.copy().reshape(-1)
                bumped[c] = base.reshape(-1)[c] + h
                p.data = bumped.reshape(base.shape)
                f_plus = fn().item()
                bumped[c] = base.reshape(-1)[c] - h
                p.data = bumped.reshape(base.shape)
                f_minus = fn().item()
                numeric[j] = (f_plus - f_minus) / (2 * h)
        p.data = base
        rel = relative_error(flat_grad[coords], numeric)
        k = int(np.argmax(rel)) if len(rel) else 0
        errors[name] = float(rel.max()) if len(rel) else 0.0
        counts[name] = len(coords)
        if len(rel):
            worst[name] = (int(coords[k]), float(flat_grad[coords[k]]), float(numeric[k]))
    return GradCheckReport(errors, h, tolerance, counts, seed, worst)
