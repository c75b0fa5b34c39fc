"""Finite-difference gradient verification for scalar-valued graphs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float

    def __post_init__(self):
        if self.max_rel_error < 0:
            raise ValueError("max_rel_error must be nonnegative")


def check_gradient(f, point, eps: float = 1e-4, max_coords: int | None = None,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the analytic gradient of ``f`` against central differences.

    ``f`` maps a Tensor to a scalar Tensor.  Evaluation always runs in
    float64 regardless of the point's dtype; the relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-8).  When ``max_coords`` is
    given, only that many coordinates (sampled without replacement) are
    probed, which keeps large graphs affordable.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError("eps must be in (0, 1e-2]")
    base = np.asarray(point.data if isinstance(point, Tensor) else point,
                      dtype=np.float64).copy()

    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise ValueError("check_gradient requires a scalar-valued graph")
    out.backward()
    analytic = (x.grad if x.grad is not None else np.zeros_like(base)).reshape(-1)

    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(flat.size, size=max_coords, replace=False)

    max_rel = 0.0
    worst = int(coords[0]) if len(coords) else 0
    worst_a = worst_n = 0.0
    for idx in coords:
        idx = int(idx)
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = float(f(Tensor(base)).data)
        flat[idx] = orig - eps
        f_minus = float(f(Tensor(base)).data)
        flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel >= max_rel:
            max_rel, worst, worst_a, worst_n = rel, idx, a, numeric
    return GradCheckReport(max_rel_error=max_rel, worst_index=worst,
                           analytic=worst_a, numeric=worst_n)
