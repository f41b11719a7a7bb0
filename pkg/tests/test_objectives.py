import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from modules.core import BudgetExhausted, InvalidArgument, SeededRng
from modules.objectives import (DatasetBudget, DoubleWell, LogRegNonconvex, QuadSaddle, build_objective,
                                clip_rows, client_shifts, per_sample_gradient, population_gradient,
                                population_hessian_smallest_eig, population_value, sample_batch)
from modules.verify import finite_difference_gradient

OBJECTIVE_CASES = [
    lambda: DoubleWell(6),
    lambda: QuadSaddle(6),
    lambda: LogRegNonconvex(6, pool_size=300),
]


def test_double_well_planted_points(double_well):
    origin = double_well.saddle_points[0]
    assert float(torch.linalg.vector_norm(double_well.gradient(origin))) == 0.0
    lam, _ = population_hessian_smallest_eig(double_well, origin)
    assert abs(lam + 1.0) < 1e-8
    for minimum in double_well.minima:
        assert float(torch.linalg.vector_norm(double_well.gradient(minimum))) == 0.0
        assert double_well.value(minimum) == 0.0


def test_quad_saddle_eigenvalues(quad_saddle):
    lam, _ = population_hessian_smallest_eig(quad_saddle, quad_saddle.saddle_points[0])
    assert abs(lam + 1.0) < 1e-8
    convex = QuadSaddle(4, eigenvalues=[0.5, 1.0, 1.5, 2.0])
    assert not convex.saddle_points
    assert len(convex.minima) == 1


@pytest.mark.parametrize("make", OBJECTIVE_CASES)
def test_population_gradient_matches_finite_differences(make):
    obj = make()
    x = SeededRng(3).uniform(obj.dim, low=-0.8, high=0.8)
    fd = finite_difference_gradient(lambda y: population_value(obj, y), x)
    assert torch.allclose(fd, population_gradient(obj, x), rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("make", OBJECTIVE_CASES)
def test_per_sample_gradient_matches_finite_differences(make):
    obj = make()
    rng = SeededRng(5)
    x = rng.uniform(obj.dim, low=-0.8, high=0.8)
    payload = obj.draw(rng, 4)
    grads = obj.sample_gradients(x, payload)
    for i in range(4):
        row = payload[i:i + 1]
        fd = finite_difference_gradient(lambda y: float(obj.sample_values(y, row)[0]), x)
        assert torch.allclose(fd, grads[i], rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("make", OBJECTIVE_CASES)
def test_hessian_is_symmetric_and_matches_hvp(make):
    obj = make()
    rng = SeededRng(9)
    x = rng.uniform(obj.dim, low=-0.5, high=0.5)
    h = obj.hessian(x)
    assert torch.allclose(h, h.T, atol=1e-12)
    v = rng.normal(obj.dim)
    assert torch.allclose(h @ v, obj.hvp(x, v), atol=1e-10)


@pytest.mark.parametrize("make", OBJECTIVE_CASES)
def test_declared_bounds_dominate_draws_in_the_box(make):
    obj = make()
    bounds = obj.bounds
    rng = SeededRng(21)
    for _ in range(40):
        x = rng.uniform(obj.dim, low=-obj.box, high=obj.box)
        y = rng.uniform(obj.dim, low=-obj.box, high=obj.box)
        assert float(torch.linalg.vector_norm(obj.gradient(x))) <= bounds.G
        hx, hy = obj.hessian(x), obj.hessian(y)
        assert float(torch.linalg.matrix_norm(hx, ord=2)) <= bounds.M + 1e-9
        quotient = float(torch.linalg.matrix_norm(hx - hy, ord=2) / torch.linalg.vector_norm(x - y))
        assert quotient <= bounds.rho + 1e-9


def test_smallest_eig_matches_dense(quad_saddle):
    x = SeededRng(2).uniform(10, low=-1.0, high=1.0)
    lam, _ = population_hessian_smallest_eig(quad_saddle, x)
    assert abs(lam - float(torch.linalg.eigvalsh(quad_saddle.hessian(x))[0])) < 1e-8


def test_dataset_budget_ids_and_exhaustion():
    budget = DatasetBudget(10, id_base=100, name="train-client3")
    assert budget.take(4).tolist() == [100, 101, 102, 103]
    assert budget.take(6).tolist() == [104, 105, 106, 107, 108, 109]
    assert budget.remaining == 0
    with pytest.raises(BudgetExhausted) as info:
        budget.take(1)
    assert info.value.client == "train-client3"


def test_sample_batch_draws_fresh_ids(double_well):
    budget = DatasetBudget(50)
    rng = SeededRng(0)
    a = sample_batch(double_well, budget, 20, rng)
    b = sample_batch(double_well, budget, 20, rng)
    assert len(a) == 20 and a.payload.shape == (20, 10)
    assert not set(a.ids.tolist()) & set(b.ids.tolist())
    assert len(sample_batch(double_well, budget, 0, rng)) == 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 10.0), st.integers(1, 20))
def test_clip_rows_bounds_norms(clip, seed):
    grads = SeededRng(seed).normal(8, 5, std=3.0)
    clipped = clip_rows(grads, clip)
    norms = torch.linalg.vector_norm(clipped, dim=1)
    assert bool(torch.all(norms <= clip * (1 + 1e-12)))
    inside = torch.linalg.vector_norm(grads, dim=1) <= clip
    assert torch.equal(clipped[inside], grads[inside])


def test_per_sample_gradient_clips(double_well):
    x = torch.full((10,), 1.4, dtype=torch.float64)
    z = sample_batch(double_well, DatasetBudget(1), 1, SeededRng(0))[0]
    g = per_sample_gradient(double_well, x, z, clip=0.5)
    assert float(torch.linalg.vector_norm(g)) <= 0.5 + 1e-12


def test_client_shifts_sum_to_zero():
    shifts = client_shifts(6, 4, 0.3, SeededRng(1))
    assert len(shifts) == 4
    assert float(torch.linalg.vector_norm(torch.stack(shifts).sum(0))) < 1e-12
    assert all(float(torch.linalg.vector_norm(s)) == 0.0 for s in client_shifts(6, 1, 0.3, SeededRng(1)))


def test_build_objective():
    assert build_objective("double-well-d", 3).dim == 3
    assert build_objective("quad-saddle", 4, quartic=0.02).quartic == 0.02
    with pytest.raises(InvalidArgument):
        build_objective("rosenbrock", 3)


def test_logreg_features_bounded():
    obj = LogRegNonconvex(5, pool_size=200)
    assert float(torch.linalg.vector_norm(obj.features, dim=1).max()) <= 1.0 + 1e-12
    assert set(obj.labels.tolist()) <= {-1.0, 1.0}
