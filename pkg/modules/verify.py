"""Exact (non-private) second-order stationarity checks and numerical cross-checks."""
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import scipy.linalg
import torch

from modules.core import (DTYPE, AssumptionWarning, ConvergenceFailure, InvalidArgument, LossBounds,
                          SeededRng, as_vector, norm)
from modules.objectives import Objective, population_gradient, population_hessian_smallest_eig

# above this dimension a stalled power iteration is reported instead of solved densely
DENSE_FALLBACK_MAX_DIM = 2048
POWER_MAX_ITER = 5000


@dataclass(frozen=True)
class SospCriterion:
    alpha_g: float
    alpha_H: float

    def __post_init__(self):
        if not self.alpha_g > 0:
            raise InvalidArgument("alpha_g must be positive")
        if not self.alpha_H >= 0:
            raise InvalidArgument("alpha_H must be non-negative")

    @classmethod
    def from_alpha(cls, alpha: float, rho: float) -> "SospCriterion":
        """The alpha-SOSP criterion: |grad| <= alpha and lambda_min >= -sqrt(rho * alpha)."""
        return cls(alpha_g=alpha, alpha_H=math.sqrt(rho * alpha))


@dataclass
class SospReport:
    grad_norm: float
    lambda_min: float
    v_min: Optional[torch.Tensor]
    passes: bool
    solver: str = "power"

    def as_dict(self):
        return dict(grad_norm=self.grad_norm, lambda_min=self.lambda_min, passes=self.passes, solver=self.solver)


def smallest_hessian_eig(obj: Objective, x, tol: float = 1e-10, rng: Optional[SeededRng] = None):
    """(lambda_min, v_min, solver): power iteration first, LAPACK when it stalls on a small gap."""
    try:
        lam, v = population_hessian_smallest_eig(obj, x, tol=tol, max_iter=POWER_MAX_ITER,
                                                 rng=rng or SeededRng(0, 3))
        return lam, v, "power"
    except ConvergenceFailure:
        if obj.dim > DENSE_FALLBACK_MAX_DIM:
            raise
    lam, v = dense_hessian_smallest_eig(obj, x)
    return lam, v, "dense"


def check_sosp(obj: Objective, x, crit: SospCriterion, tol: float = 1e-10,
               rng: Optional[SeededRng] = None) -> SospReport:
    """Evaluate the exact gradient norm and smallest Hessian eigenvalue at ``x``.

    On eigen-solver failure the raised ConvergenceFailure carries a partial ``report``.
    """
    x = as_vector(x, obj.dim)
    g = norm(population_gradient(obj, x))
    try:
        lam, v, solver = smallest_hessian_eig(obj, x, tol, rng)
    except ConvergenceFailure as e:
        e.report = SospReport(g, e.best_value, e.best_vector, False)
        raise
    return SospReport(g, lam, v, g <= crit.alpha_g and lam >= -crit.alpha_H, solver)


def strict_saddle_margin(obj, x, rho, alpha, tol=1e-10):
    """lambda_min(Hessian) + sqrt(rho * alpha); negative at an alpha-strict saddle."""
    if rho * alpha < 0:
        raise InvalidArgument("rho * alpha must be non-negative")
    lam, _, _ = smallest_hessian_eig(obj, x, tol)
    return lam + math.sqrt(rho * alpha)


def dense_smallest_eig(matrix):
    a = torch.as_tensor(matrix, dtype=DTYPE).numpy()
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgument("expected a square matrix")
    w, v = scipy.linalg.eigh(a, subset_by_index=[0, 0])
    return float(w[0]), torch.as_tensor(v[:, 0], dtype=DTYPE)


def dense_hessian_smallest_eig(obj, x):
    return dense_smallest_eig(obj.hessian(as_vector(x, obj.dim)))


def finite_difference_gradient(fn, x, h=1e-6):
    x = as_vector(x)
    eye = torch.eye(x.numel(), dtype=DTYPE)
    return torch.tensor([(fn(x + h * e) - fn(x - h * e)) / (2.0 * h) for e in eye], dtype=DTYPE)


def check_curvature_assumption(bounds: LossBounds, alpha: float) -> bool:
    """M >= sqrt(rho * alpha); warns and returns False when it does not hold."""
    if bounds.curvature_ok(alpha):
        return True
    warnings.warn("M={:.4g} < sqrt(rho*alpha)={:.4g}; the escape analysis assumes the opposite"
                  .format(bounds.M, math.sqrt(bounds.rho * alpha)), AssumptionWarning)
    return False
