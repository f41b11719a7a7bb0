"""Synthetic stochastic objectives with exact population oracles.

Each objective declares its constants (G, M, rho, U) over the box ||x||_inf <= box.
Per-sample losses are f(x; z); the population risk F(x) = E_z f(x; z) and its
derivatives are available in closed form.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import torch

from modules.core import (DTYPE, BudgetExhausted, InvalidArgument, LossBounds, SeededRng,
                          as_vector, norm, shifted_power_iteration)

logger = logging.getLogger(__name__)

PLANTED_GRAD_TOL = 1e-10


@dataclass(frozen=True)
class Sample:
    sample_id: int
    payload: torch.Tensor


class SampleBatch:
    def __init__(self, ids: torch.Tensor, payload: torch.Tensor):
        assert ids.shape[0] == payload.shape[0]
        self.ids = ids
        self.payload = payload

    def __len__(self):
        return int(self.ids.shape[0])

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(int(self.ids[i]), self.payload[i])

    def __getitem__(self, i) -> Sample:
        return Sample(int(self.ids[i]), self.payload[i])


class DatasetBudget:
    """Running sample count of one logical dataset.

    Sample ids are ``id_base + k`` for the k-th sample drawn, so ids from distinct
    budgets never collide as long as their bases are ``>= total`` apart.
    """

    def __init__(self, total: int, id_base: int = 0, name: str = "data"):
        if total < 0:
            raise InvalidArgument("budget total must be non-negative")
        self.total = int(total)
        self.consumed = 0
        self.id_base = int(id_base)
        self.name = name

    @property
    def remaining(self) -> int:
        return self.total - self.consumed

    def take(self, b: int) -> torch.Tensor:
        if b < 0:
            raise InvalidArgument("batch size must be non-negative")
        if self.consumed + b > self.total:
            raise BudgetExhausted("{}: requested {} samples, {} of {} remain"
                                  .format(self.name, b, self.remaining, self.total), client=self.name)
        ids = torch.arange(self.id_base + self.consumed, self.id_base + self.consumed + b)
        self.consumed += b
        return ids

    def __repr__(self):
        return "DatasetBudget({}, {}/{})".format(self.name, self.consumed, self.total)


class Objective:
    """Base class: subclasses implement the analytic oracles below."""

    name = "objective"
    payload_dim = 0

    def __init__(self, dim: int, box: float, bounds: LossBounds, saddle_points=(), minima=(),
                 alpha_ref: Optional[float] = None):
        if dim < 1:
            raise InvalidArgument("dim must be positive")
        self.dim = int(dim)
        self.box = float(box)
        self.bounds = bounds
        self.saddle_points = [as_vector(p, self.dim) for p in saddle_points]
        self.minima = [as_vector(p, self.dim) for p in minima]
        self.alpha_ref = alpha_ref if alpha_ref is not None else 0.25 / max(bounds.rho, 1e-12)
        self._check_planted()

    def value(self, x: torch.Tensor) -> float:
        raise NotImplementedError

    def gradient(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def hvp(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def draw(self, rng: SeededRng, b: int) -> torch.Tensor:
        raise NotImplementedError

    def sample_values(self, x: torch.Tensor, payload: torch.Tensor) -> torch.Tensor:
        """Per-sample losses f(x; z), shape (b,)."""
        raise NotImplementedError

    def sample_gradients(self, x: torch.Tensor, payload: torch.Tensor) -> torch.Tensor:
        """Per-sample gradients, shape (b, d)."""
        raise NotImplementedError

    def sample_hessian_mean(self, x: torch.Tensor, payload: torch.Tensor) -> torch.Tensor:
        """Empirical Hessian averaged over the payload rows, shape (d, d)."""
        raise NotImplementedError

    def hessian(self, x: torch.Tensor) -> torch.Tensor:
        eye = torch.eye(self.dim, dtype=DTYPE)
        h = torch.stack([self.hvp(x, eye[i]) for i in range(self.dim)])
        return 0.5 * (h + h.T)

    def in_box(self, x: torch.Tensor) -> bool:
        return bool(torch.max(torch.abs(x)) <= self.box)

    def _check_planted(self):
        for p in self.saddle_points:
            g = norm(self.gradient(p))
            lam, _ = population_hessian_smallest_eig(self, p, tol=1e-12)
            if g > PLANTED_GRAD_TOL or not lam < 0:
                raise InvalidArgument("{}: planted saddle is not a strict saddle (|grad|={:.3e}, "
                                      "lambda_min={:.3e})".format(self.name, g, lam))

    def __repr__(self):
        return "{}(dim={}, box={})".format(type(self).__name__, self.dim, self.box)


class DoubleWell(Objective):
    """f(x; z) = sum_i (x_i^2 - 1)^2 / 4 + <z, x>, z ~ Uniform[-a, a]^d."""

    name = "double-well-d"

    def __init__(self, dim: int, noise_scale: float = 0.5, box: float = 1.5):
        self.noise_scale = float(noise_scale)
        self.payload_dim = dim
        drift = max(box ** 3 - box, 2.0 / (3.0 * math.sqrt(3.0)))
        bounds = LossBounds(G=math.sqrt(dim) * (drift + noise_scale),
                            M=max(3.0 * box ** 2 - 1.0, 1.0),
                            rho=6.0 * box,
                            U=dim * max((box ** 2 - 1.0) ** 2, 1.0) / 4.0,
                            Fstar=0.0)
        ones = torch.ones(dim, dtype=DTYPE)
        super(DoubleWell, self).__init__(dim, box, bounds, saddle_points=[torch.zeros(dim, dtype=DTYPE)],
                                         minima=[ones, -ones])

    def value(self, x):
        return float(torch.sum((x ** 2 - 1.0) ** 2) / 4.0)

    def gradient(self, x):
        return x ** 3 - x

    def hvp(self, x, v):
        return (3.0 * x ** 2 - 1.0) * v

    def hessian(self, x):
        return torch.diag(3.0 * x ** 2 - 1.0)

    def draw(self, rng, b):
        return rng.uniform(b, self.dim, low=-self.noise_scale, high=self.noise_scale)

    def sample_values(self, x, payload):
        return torch.sum((x ** 2 - 1.0) ** 2) / 4.0 + payload @ x

    def sample_gradients(self, x, payload):
        return (x ** 3 - x).unsqueeze(0) + payload

    def sample_hessian_mean(self, x, payload):
        return self.hessian(x)


class QuadSaddle(Objective):
    """f(x; z) = x^T A x / 2 + <z, x> + lam * sum_i x_i^4, z ~ N(0, a^2 I).

    A = V diag(eigenvalues) V^T with V a seeded random rotation. With one negative
    eigenvalue the origin is a planted strict saddle; with none it is the minimum.
    """

    name = "quad-saddle"

    def __init__(self, dim: int, eigenvalues: Optional[Sequence[float]] = None, quartic: float = 0.01,
                 noise_scale: float = 0.1, box: float = 2.0, seed: int = 0):
        if eigenvalues is None:
            eigenvalues = [-1.0] + ([1.0] if dim == 2 else list(torch.linspace(0.5, 2.0, dim - 1).tolist()))
        eigenvalues = torch.as_tensor(list(eigenvalues), dtype=DTYPE)[:dim]
        if eigenvalues.numel() != dim:
            raise InvalidArgument("need {} eigenvalues".format(dim))
        if quartic <= 0:
            raise InvalidArgument("quartic weight must be positive so that rho > 0")
        q, _ = torch.linalg.qr(SeededRng(seed, 7).normal(dim, dim))
        self.eigenvalues = eigenvalues
        self.A = q @ torch.diag(eigenvalues) @ q.T
        self.A = 0.5 * (self.A + self.A.T)
        self.quartic = float(quartic)
        self.noise_scale = float(noise_scale)
        self.payload_dim = dim

        a_norm = float(torch.max(torch.abs(eigenvalues)))
        a_neg = float(torch.clamp(-eigenvalues.min(), min=0.0))
        tail = 3.0 * noise_scale * math.sqrt(dim)
        bounds = LossBounds(G=math.sqrt(dim) * box * a_norm + 4.0 * quartic * math.sqrt(dim) * box ** 3 + tail,
                            M=a_norm + 12.0 * quartic * box ** 2,
                            rho=24.0 * quartic * box,
                            U=0.5 * dim * box ** 2 * (a_norm + a_neg) + quartic * dim * box ** 4,
                            Fstar=None)
        origin = torch.zeros(dim, dtype=DTYPE)
        negative = bool(eigenvalues.min() < 0)
        super(QuadSaddle, self).__init__(dim, box, bounds,
                                         saddle_points=[origin] if negative else [],
                                         minima=[] if negative else [origin])

    def value(self, x):
        return float(0.5 * x @ self.A @ x + self.quartic * torch.sum(x ** 4))

    def gradient(self, x):
        return self.A @ x + 4.0 * self.quartic * x ** 3

    def hvp(self, x, v):
        return self.A @ v + 12.0 * self.quartic * x ** 2 * v

    def hessian(self, x):
        return self.A + torch.diag(12.0 * self.quartic * x ** 2)

    def draw(self, rng, b):
        return rng.normal(b, self.dim, std=self.noise_scale)

    def sample_values(self, x, payload):
        return 0.5 * x @ self.A @ x + self.quartic * torch.sum(x ** 4) + payload @ x

    def sample_gradients(self, x, payload):
        return self.gradient(x).unsqueeze(0) + payload

    def sample_hessian_mean(self, x, payload):
        return self.hessian(x)


def _sigmoid(t):
    return torch.sigmoid(t)


class LogRegNonconvex(Objective):
    """Logistic loss over a fixed seeded pool of labelled points plus a non-convex penalty.

    The data distribution is uniform over the pool, so the population risk is the pool
    average and is exact. Features have norm <= 1.
    """

    name = "logreg-ncvx"

    def __init__(self, dim: int, pool_size: int = 2000, reg: float = 0.1, box: float = 5.0,
                 label_noise: float = 0.1, seed: int = 0):
        rng = SeededRng(seed, 11)
        feats = rng.normal(pool_size, dim)
        feats = feats / torch.clamp(torch.linalg.vector_norm(feats, dim=1, keepdim=True), min=1.0)
        w_true = rng.unit_vector(dim)
        labels = torch.sign(feats @ w_true)
        labels[labels == 0] = 1.0
        flip = rng.uniform(pool_size) < label_noise
        labels[flip] = -labels[flip]
        self.features = feats
        self.labels = labels
        self.reg = float(reg)
        self.payload_dim = 1

        # |r'| <= 3 sqrt(3) / 8, |r''| <= 2, |r'''| <= 4.7 for r(t) = t^2 / (1 + t^2)
        bounds = LossBounds(G=1.0 + reg * math.sqrt(dim) * 3.0 * math.sqrt(3.0) / 8.0,
                            M=0.25 + 2.0 * reg,
                            rho=1.0 / (6.0 * math.sqrt(3.0)) + 4.7 * reg,
                            U=math.log1p(math.exp(min(math.sqrt(dim) * box, 700.0))) + reg * dim,
                            Fstar=None)
        super(LogRegNonconvex, self).__init__(dim, box, bounds)

    def _margins(self, x, idx=None):
        a = self.features if idx is None else self.features[idx]
        y = self.labels if idx is None else self.labels[idx]
        return a, y, y * (a @ x)

    def value(self, x):
        _, _, m = self._margins(x)
        return float(torch.mean(torch.nn.functional.softplus(-m)) + self.reg * torch.sum(x ** 2 / (1.0 + x ** 2)))

    def _reg_grad(self, x):
        return self.reg * 2.0 * x / (1.0 + x ** 2) ** 2

    def _reg_curv(self, x):
        return self.reg * (2.0 - 6.0 * x ** 2) / (1.0 + x ** 2) ** 3

    def gradient(self, x):
        return self.sample_gradients(x, torch.arange(len(self.labels)).unsqueeze(1)).mean(0)

    def hvp(self, x, v):
        a, _, m = self._margins(x)
        w = _sigmoid(m) * (1.0 - _sigmoid(m))
        return a.T @ (w * (a @ v)) / a.shape[0] + self._reg_curv(x) * v

    def hessian(self, x):
        return self.sample_hessian_mean(x, torch.arange(len(self.labels)).unsqueeze(1))

    def draw(self, rng, b):
        return rng.integers(len(self.labels), b).unsqueeze(1)

    def sample_values(self, x, payload):
        _, _, m = self._margins(x, payload[:, 0].long())
        return torch.nn.functional.softplus(-m) + self.reg * torch.sum(x ** 2 / (1.0 + x ** 2))

    def sample_gradients(self, x, payload):
        idx = payload[:, 0].long()
        a, y, m = self._margins(x, idx)
        coef = -y * _sigmoid(-m)
        return coef.unsqueeze(1) * a + self._reg_grad(x).unsqueeze(0)

    def sample_hessian_mean(self, x, payload):
        idx = payload[:, 0].long()
        a, _, m = self._margins(x, idx)
        w = _sigmoid(m) * (1.0 - _sigmoid(m))
        return (a.T * w) @ a / a.shape[0] + torch.diag(self._reg_curv(x))


OBJECTIVES = {
    DoubleWell.name: DoubleWell,
    QuadSaddle.name: QuadSaddle,
    LogRegNonconvex.name: LogRegNonconvex,
}


def build_objective(name: str, dim: int, **options) -> Objective:
    if name not in OBJECTIVES:
        raise InvalidArgument("unknown objective '{}', expected one of {}".format(name, sorted(OBJECTIVES)))
    return OBJECTIVES[name](dim, **options)


def _check_dim(obj: Objective, x) -> torch.Tensor:
    return as_vector(x, obj.dim)


def population_value(obj: Objective, x) -> float:
    return obj.value(_check_dim(obj, x))


def population_gradient(obj: Objective, x) -> torch.Tensor:
    return obj.gradient(_check_dim(obj, x))


def population_hessian_smallest_eig(obj: Objective, x, tol: float = 1e-10, max_iter: int = 20000,
                                    rng: Optional[SeededRng] = None):
    """(lambda_min, unit eigenvector) of the exact population Hessian via Hessian-vector products."""
    x = _check_dim(obj, x)
    # the declared M bounds the spectrum inside the box only
    shift = obj.bounds.M + 1.0
    if not obj.in_box(x):
        shift = max(shift, float(torch.linalg.matrix_norm(obj.hessian(x), ord=2)) + 1.0)
    return shifted_power_iteration(lambda v: obj.hvp(x, v), obj.dim, shift, tol=tol, max_iter=max_iter, rng=rng)


def sample_batch(obj: Objective, budget: DatasetBudget, b: int, rng: SeededRng) -> SampleBatch:
    ids = budget.take(b)
    if b == 0:
        return SampleBatch(ids, torch.zeros(0, obj.payload_dim, dtype=DTYPE))
    return SampleBatch(ids, obj.draw(rng, b))


def clip_rows(grads: torch.Tensor, clip: Optional[float]) -> torch.Tensor:
    """Rescale each row to norm <= clip; rows already inside are returned untouched."""
    if clip is None:
        return grads
    if clip <= 0:
        raise InvalidArgument("clip must be positive")
    norms = torch.linalg.vector_norm(grads, dim=1, keepdim=True)
    scale = torch.where(norms > clip, clip / norms, torch.ones_like(norms))
    return grads * scale


def batch_gradients(obj: Objective, x, batch: SampleBatch, clip: Optional[float] = None,
                    shift: Optional[torch.Tensor] = None) -> torch.Tensor:
    x = _check_dim(obj, x)
    grads = obj.sample_gradients(x, batch.payload)
    if shift is not None:
        grads = grads + shift.unsqueeze(0)
    return clip_rows(grads, clip)


def per_sample_gradient(obj: Objective, x, z: Sample, clip: Optional[float] = None) -> torch.Tensor:
    x = _check_dim(obj, x)
    g = obj.sample_gradients(x, z.payload.unsqueeze(0))
    return clip_rows(g, clip)[0]


def client_shifts(dim: int, m: int, scale: float, rng: SeededRng) -> List[torch.Tensor]:
    """Zero-sum linear drifts making client objectives heterogeneous."""
    if m == 1 or scale == 0:
        return [torch.zeros(dim, dtype=DTYPE) for _ in range(m)]
    raw = rng.normal(m, dim, std=scale / math.sqrt(dim))
    raw = raw - raw.mean(0, keepdim=True)
    return [raw[j] for j in range(m)]
