import math

import pytest
import torch

from modules.core import AssumptionWarning, InvalidArgument, LossBounds, SeededRng, shifted_power_iteration
from modules.objectives import DoubleWell, QuadSaddle, population_hessian_smallest_eig
from modules.verify import (SospCriterion, check_curvature_assumption, check_sosp, dense_hessian_smallest_eig,
                            dense_smallest_eig, finite_difference_gradient, strict_saddle_margin)


def test_criterion_from_alpha():
    crit = SospCriterion.from_alpha(0.04, 9.0)
    assert crit.alpha_g == 0.04
    assert math.isclose(crit.alpha_H, 0.6, rel_tol=1e-12)
    with pytest.raises(InvalidArgument):
        SospCriterion(alpha_g=0.0, alpha_H=1.0)


def test_minimum_passes_and_saddle_fails(double_well):
    crit = SospCriterion.from_alpha(0.04, double_well.bounds.rho)
    at_min = check_sosp(double_well, double_well.minima[0], crit)
    assert at_min.passes and abs(at_min.lambda_min - 2.0) < 1e-8
    at_saddle = check_sosp(double_well, double_well.saddle_points[0], crit)
    assert not at_saddle.passes
    assert at_saddle.grad_norm == 0.0 and abs(at_saddle.lambda_min + 1.0) < 1e-8


def test_report_gradient_matches_finite_differences(double_well):
    x = SeededRng(4).uniform(10, low=-1.0, high=1.0)
    report = check_sosp(double_well, x, SospCriterion(1.0, 1.0))
    fd = finite_difference_gradient(double_well.value, x)
    assert abs(report.grad_norm - float(torch.linalg.vector_norm(fd))) < 1e-6
    assert set(report.as_dict()) == {"grad_norm", "lambda_min", "passes", "solver"}


def test_strict_saddle_margin():
    obj = QuadSaddle(6, eigenvalues=[-2.0, 1.0, 1.0, 1.5, 2.0, 3.0])
    origin = obj.saddle_points[0]
    assert abs(strict_saddle_margin(obj, origin, rho=1.0, alpha=1.0) + 1.0) < 1e-8


def test_power_and_dense_agree_on_a_grid(quad_saddle):
    rng = SeededRng(8)
    for _ in range(100):
        x = rng.uniform(10, low=-1.5, high=1.5)
        power, _ = population_hessian_smallest_eig(quad_saddle, x)
        dense, _ = dense_hessian_smallest_eig(quad_saddle, x)
        assert abs(power - dense) < 1e-8


@pytest.mark.parametrize("d", [2, 8, 32, 64])
def test_power_iteration_with_repeated_eigenvalues(d):
    rng = SeededRng(d)
    q, _ = torch.linalg.qr(rng.normal(d, d))
    eigs = torch.cat([torch.full((2,), -1.0, dtype=torch.float64),
                      torch.linspace(0.0, 3.0, d - 2, dtype=torch.float64)]) if d > 2 else \
        torch.tensor([-1.0, -1.0], dtype=torch.float64)
    a = q @ torch.diag(eigs) @ q.T
    a = 0.5 * (a + a.T)
    lam, _ = shifted_power_iteration(lambda v: a @ v, d, shift=4.0, tol=1e-10, rng=rng)
    dense, _ = dense_smallest_eig(a)
    assert abs(lam - dense) < 1e-8
    assert abs(dense + 1.0) < 1e-10


def test_near_degenerate_hessian_falls_back_to_dense():
    obj = DoubleWell(6)
    x = torch.tensor([0.5, 0.50001, 1.0, 1.0, -1.0, 1.0], dtype=torch.float64)
    report = check_sosp(obj, x, SospCriterion(1.0, 1.0))
    assert report.solver == "dense"
    assert abs(report.lambda_min + 0.25) < 1e-12


def test_dense_rejects_non_square():
    with pytest.raises(InvalidArgument):
        dense_smallest_eig(torch.zeros(2, 3))


def test_curvature_assumption_warning():
    bounds = LossBounds(G=1.0, M=0.1, rho=10.0, U=1.0)
    with pytest.warns(AssumptionWarning):
        assert not check_curvature_assumption(bounds, alpha=1.0)
    assert check_curvature_assumption(LossBounds(G=1.0, M=10.0, rho=1.0, U=1.0), alpha=1.0)
