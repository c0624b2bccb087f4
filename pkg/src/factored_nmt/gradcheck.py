"""Finite-difference gradient checking.

The one numerical oracle every trainable module must pass: analytic
gradients from the reverse-mode engine are compared coordinate-wise
against central differences (f(x+eps) - f(x-eps)) / (2 eps), evaluated in
float64 with any stochastic behavior (dropout) disabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .tensor import Tensor


class NumericalError(RuntimeError):
    """Non-finite values encountered while checking gradients."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    eps: float
    checked: int
    per_param: Dict[str, float] = field(default_factory=dict)
    worst_param: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
            f"(tol {self.tol:.1e}, eps {self.eps:.1e}, {self.checked} coordinates, "
            f"worst: {self.worst_param})"
        )


def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int = 0,
    min_total_coords: int = 100,
    rng: Optional[np.random.Generator] = None,
    denom_floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``f`` must be deterministic and close over ``params``; every parameter
    should be float64 for the differences to resolve below ``tol``. All
    coordinates are checked unless that exceeds ``min_total_coords`` (or
    ``max_coords_per_param`` per tensor), in which case a random sample of
    at least ``min_total_coords`` coordinates is drawn.

    ``denom_floor`` keeps the relative error meaningful for near-zero
    coordinates: below the floor the check degrades to an absolute
    tolerance of ``tol * denom_floor``.
    """
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, {name} is {p.dtype}")
        p.zero_grad()

    out = f()
    if out.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise NumericalError("non-finite value in f()")
    out.backward()

    total = sum(p.size for p in params.values())
    budget_per_param: Dict[str, int] = {}
    if total <= min_total_coords and not max_coords_per_param:
        for name, p in params.items():
            budget_per_param[name] = p.size
    else:
        for name, p in params.items():
            want = max(1, round(min_total_coords * p.size / total))
            if max_coords_per_param:
                want = min(want, max_coords_per_param)
            budget_per_param[name] = min(want, p.size)

    max_err = 0.0
    worst = None
    checked = 0
    per_param: Dict[str, float] = {}
    for name, p in params.items():
        if p.grad is None:
            analytic_full = np.zeros_like(p.data)
        else:
            if not np.isfinite(p.grad).all():
                raise NumericalError(f"non-finite analytic gradient in {name}")
            analytic_full = p.grad
        n = budget_per_param[name]
        if n >= p.size:
            coords: List[int] = list(range(p.size))
        else:
            coords = list(rng.choice(p.size, size=n, replace=False))
        flat = p.data.reshape(-1)
        param_err = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(f().data)
            flat[c] = orig - eps
            f_minus = float(f().data)
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(f"non-finite f() while perturbing {name}[{c}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = _relative_error(float(analytic_full.reshape(-1)[c]), numeric, denom_floor)
            param_err = max(param_err, err)
            checked += 1
        per_param[name] = param_err
        if param_err > max_err:
            max_err = param_err
            worst = name

    return GradCheckReport(
        max_rel_error=max_err,
        tol=tol,
        eps=eps,
        checked=checked,
        per_param=per_param,
        worst_param=worst,
    )
