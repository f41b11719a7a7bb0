import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# (7/8)^Q is the failure probability of Q independent escape rounds.
ROUND_FAILURE = 7.0 / 8.0


class SospError(Exception):
    pass


class InvalidArgument(SospError, ValueError):
    pass


class BudgetExhausted(SospError):
    def __init__(self, message, client=None):
        super(BudgetExhausted, self).__init__(message)
        self.client = client


class AccountingViolation(SospError):
    pass


class ConvergenceFailure(SospError):
    def __init__(self, message, best_vector=None, best_value=None):
        super(ConvergenceFailure, self).__init__(message)
        self.best_vector = best_vector
        self.best_value = best_value


class OracleStateError(SospError, RuntimeError):
    pass


class AssumptionWarning(UserWarning):
    pass


def as_vector(x, dim: Optional[int] = None) -> torch.Tensor:
    """Convert ``x`` to a finite 1-D float64 tensor, optionally of length ``dim``."""
    v = torch.as_tensor(x, dtype=DTYPE)
    if v.dim() != 1 or v.numel() == 0:
        raise InvalidArgument("expected a non-empty 1-D vector, got shape {}".format(tuple(v.shape)))
    if dim is not None and v.numel() != dim:
        raise InvalidArgument("dimension mismatch: expected {}, got {}".format(dim, v.numel()))
    if not torch.isfinite(v).all():
        raise InvalidArgument("vector has non-finite entries")
    return v


def norm(x: torch.Tensor) -> float:
    return float(torch.linalg.vector_norm(x))


@dataclass(frozen=True)
class LossBounds:
    G: float
    M: float
    rho: float
    U: float
    Fstar: Optional[float] = None

    def __post_init__(self):
        for name in ("G", "M", "U"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise InvalidArgument("{} must be positive and finite, got {}".format(name, value))
        if not (self.rho >= 0 and math.isfinite(self.rho)):
            raise InvalidArgument("rho must be non-negative, got {}".format(self.rho))

    def curvature_ok(self, alpha: float) -> bool:
        return self.M >= math.sqrt(self.rho * alpha)


@dataclass(frozen=True)
class NoiseProfile:
    sigma: float
    r: float
    dim: int
    psi: float = field(init=False)

    def __post_init__(self):
        if self.sigma < 0 or self.r < 0:
            raise InvalidArgument("noise scales must be non-negative")
        if self.dim < 1:
            raise InvalidArgument("dim must be positive")
        object.__setattr__(self, "psi", math.sqrt(self.sigma ** 2 + self.r ** 2 * self.dim))


@dataclass(frozen=True)
class PsgdParams:
    s: float
    C: float
    mu: float
    iota: float
    chi: float
    alpha: float
    Gamma: int
    R: float
    Phi: float
    eta: float
    Q: int
    omega: float
    Q_closed_form: Optional[int] = None
    mu_branches: Tuple[float, ...] = ()
    mu_residual: float = 0.0
    curvature_warning: bool = False
    eta_clamped: bool = False
    preset: Optional[str] = None

    def __post_init__(self):
        if not math.isclose(self.alpha, 4.0 * self.chi, rel_tol=1e-12):
            raise InvalidArgument("alpha must equal 4*chi")
        for name in ("s", "C", "mu", "iota", "chi", "eta"):
            if not getattr(self, name) > 0:
                raise InvalidArgument("{} must be positive".format(name))
        if self.R < 0 or self.Phi < 0:
            raise InvalidArgument("R and Phi must be non-negative")
        if int(self.Gamma) != self.Gamma or self.Gamma < 1:
            raise InvalidArgument("Gamma must be an integer >= 1")
        if int(self.Q) != self.Q or self.Q < 1:
            raise InvalidArgument("Q must be an integer >= 1")
        if not 0 < self.omega < 1:
            raise InvalidArgument("omega must lie in (0, 1)")

    def with_overrides(self, bounds, noise=None, chi=None, mu=None, Gamma=None, Q=None, preset=None):
        """Pin some of mu/chi/Gamma/Q and rebuild the rest of the block from the same formulas.

        A pinned ``mu`` without a pinned ``chi`` re-derives chi from ``noise``.
        """
        mu = self.mu if mu is None else float(mu)
        if mu < 1:
            raise InvalidArgument("mu must be >= 1, got {}".format(mu))
        iota = self.s * mu
        if chi is not None:
            chi = float(chi)
        elif mu != self.mu and noise is not None:
            chi = 4.0 * math.sqrt(self.C) * self.s * mu ** 2 * noise.psi
        else:
            chi = self.chi
        alpha = 4.0 * chi
        eta, clamped = _step_size(bounds.rho, alpha, bounds.M, iota)
        if Q is None:
            Q, Q_closed = _repetitions(self.s, self.omega, iota, bounds.U, chi, bounds.rho)
        else:
            Q, Q_closed = int(Q), self.Q_closed_form
        return replace(self, mu=mu, iota=iota, chi=chi, alpha=alpha, eta=eta, eta_clamped=clamped,
                       R=_radius(iota, alpha, bounds.rho), Phi=_decrease(self.s, iota, alpha, bounds.rho),
                       Gamma=int(Gamma) if Gamma is not None else _escape_length(self.s, iota, eta, bounds.rho,
                                                                                 alpha),
                       Q=Q, Q_closed_form=Q_closed,
                       curvature_warning=not bounds.curvature_ok(alpha), preset=preset)


def _finite_log(x: float) -> float:
    if not (x > 0) or math.isinf(x) or math.isnan(x):
        return float("nan")
    return math.log(x)


def _step_size(rho, alpha, M, iota):
    eta = math.sqrt(rho * alpha) / (M ** 2 * iota ** 2)
    if eta * M > 1.0:
        return 1.0 / M, True
    return eta, False


def _radius(iota, alpha, rho):
    return iota ** -1.5 * math.sqrt(alpha / rho)


def _decrease(s, iota, alpha, rho):
    return s / (8.0 * iota ** 3) * math.sqrt(alpha ** 3 / rho)


def _escape_length(s, iota, eta, rho, alpha):
    return max(1, math.ceil(iota / (s * eta * math.sqrt(rho * alpha))))


def _repetitions(s, omega, iota, gap, chi, rho):
    """(Q, closed-form Q) for the per-round failure target omega0."""
    omega0 = s * omega / (16.0 * iota ** 3 * gap) * math.sqrt(chi ** 3 / rho)
    if omega0 >= 1.0:
        return 1, 1
    return repetitions_for(omega0), repetitions_closed_form(omega0)


def mu_branches(noise: NoiseProfile, rho: float, eta: float, s: float, C: float,
                omega: float, horizon: int) -> Tuple[float, float, float, float]:
    """The four branches of the log factor; non-finite branches come back as nan."""
    psi, r, d = noise.psi, noise.r, noise.dim
    c4 = C ** 0.25
    ratio = math.sqrt(psi / rho) if rho > 0 else float("inf")
    inner = _finite_log(4.0 * c4 / (s * eta * r) * ratio) if r > 0 else float("nan")
    first = _finite_log(9.0 * d * inner / (c4 * eta * math.sqrt(s * rho * psi))) / s \
        if rho > 0 and math.isfinite(inner) else float("nan")
    second = _finite_log(160.0 * math.sqrt(2.0) * c4 / (s * math.sqrt(eta * r)) * ratio) \
        if r > 0 else float("nan")
    third = (C * math.log(4.0 * horizon / omega)) ** 0.25 / (2.0 ** 0.75 * math.sqrt(s))
    return first, second, third, 1.0


def derive_params(bounds: LossBounds, noise: NoiseProfile, s: float = 4.0, C: float = 1.0,
                  omega: float = 0.1, horizon_hint: int = 1000, f_gap: Optional[float] = None) -> PsgdParams:
    """Build the Gauss-PSGD constant block from problem bounds and the oracle noise profile.

    The log factor depends on the step size, which depends on the log factor. It is resolved
    by evaluating the step size at the eta-free lower bound max(third branch, 1), then taking
    the max over all four branches; the resulting inconsistency is kept in ``mu_residual``.
    """
    if not 0 < omega < 1:
        raise InvalidArgument("omega must lie in (0, 1), got {}".format(omega))
    if s <= 0 or C <= 0 or horizon_hint < 1:
        raise InvalidArgument("s, C and horizon_hint must be positive")
    if bounds.rho <= 0:
        raise InvalidArgument("rho must be positive to derive escape parameters")
    if noise.psi <= 0:
        raise InvalidArgument("noise profile has psi = 0; the perturbation must be non-degenerate")

    def block(mu):
        iota = s * mu
        chi = 4.0 * math.sqrt(C) * s * mu ** 2 * noise.psi
        alpha = 4.0 * chi
        eta, clamped = _step_size(bounds.rho, alpha, bounds.M, iota)
        return iota, chi, alpha, eta, clamped

    branches = mu_branches(noise, bounds.rho, 1.0, s, C, omega, horizon_hint)
    mu0 = max(branches[2], branches[3])
    eta0 = block(mu0)[3]
    branches = mu_branches(noise, bounds.rho, eta0, s, C, omega, horizon_hint)
    finite = [b for b in branches if math.isfinite(b)]
    if not finite:
        raise InvalidArgument("all log-factor branches are non-finite")
    mu = max(finite)
    iota, chi, alpha, eta, clamped = block(mu)

    check = [b for b in mu_branches(noise, bounds.rho, eta, s, C, omega, horizon_hint) if math.isfinite(b)]
    residual = abs(max(check) - mu) / mu

    Gamma = _escape_length(s, iota, eta, bounds.rho, alpha)
    Q, Q_closed = _repetitions(s, omega, iota, bounds.U if f_gap is None else f_gap, chi, bounds.rho)

    curvature_warning = not bounds.curvature_ok(alpha)
    if curvature_warning:
        logger.debug("M=%g < sqrt(rho*alpha)=%g", bounds.M, math.sqrt(bounds.rho * alpha))
    return PsgdParams(s=s, C=C, mu=mu, iota=iota, chi=chi, alpha=alpha, Gamma=Gamma,
                      R=_radius(iota, alpha, bounds.rho), Phi=_decrease(s, iota, alpha, bounds.rho),
                      eta=eta, Q=Q, omega=omega, Q_closed_form=Q_closed, mu_branches=tuple(branches),
                      mu_residual=residual, curvature_warning=curvature_warning, eta_clamped=clamped)


def manual_params(eta: float, Gamma: int, R: float, chi: float, Q: int = 1, Phi: float = 0.0,
                  s: float = 4.0, omega: float = 0.1, preset: str = "manual") -> PsgdParams:
    """A parameter block with the step, escape length and radius set by hand (mu = 1)."""
    return PsgdParams(s=s, C=1.0, mu=1.0, iota=s, chi=chi, alpha=4.0 * chi, Gamma=int(Gamma), R=R, Phi=Phi,
                      eta=eta, Q=int(Q), omega=omega, preset=preset)


def repetitions_closed_form(omega0: float) -> int:
    if not 0 < omega0 < 1:
        raise InvalidArgument("omega0 must lie in (0, 1), got {}".format(omega0))
    return max(1, math.ceil(26.0 / 5.0 * math.log(1.0 / omega0)))


def repetitions_for(omega0: float) -> int:
    """Smallest Q with (7/8)^Q <= omega0."""
    if not 0 < omega0 < 1:
        raise InvalidArgument("omega0 must lie in (0, 1), got {}".format(omega0))
    Q = max(1, math.ceil(math.log(omega0) / math.log(ROUND_FAILURE)))
    while ROUND_FAILURE ** Q > omega0:
        Q += 1
    while Q > 1 and ROUND_FAILURE ** (Q - 1) <= omega0:
        Q -= 1
    return Q


class SeededRng:
    """A torch generator keyed by (seed, stream).

    Streams are tuples so that substreams nest; the generator seed is drawn from
    ``numpy.random.SeedSequence`` which makes distinct keys independent.
    """

    def __init__(self, seed: int, stream: Union[int, Sequence[int]] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = (int(stream),) if isinstance(stream, int) else tuple(int(s) for s in stream)
        words = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream).generate_state(2, dtype=np.uint32)
        self.generator = torch.Generator().manual_seed((int(words[0]) << 31) ^ int(words[1]))

    def substream(self, *ids: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(int(i) for i in ids))

    def normal(self, *shape: int, std: float = 1.0) -> torch.Tensor:
        z = torch.randn(*shape, generator=self.generator, dtype=DTYPE)
        return z * std if std != 1.0 else z

    def uniform(self, *shape: int, low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        return low + (high - low) * torch.rand(*shape, generator=self.generator, dtype=DTYPE)

    def integers(self, high: int, size: int) -> torch.Tensor:
        return torch.randint(high, (size,), generator=self.generator)

    def unit_vector(self, dim: int) -> torch.Tensor:
        v = self.normal(dim)
        return v / torch.linalg.vector_norm(v)

    def __repr__(self):
        return "SeededRng(seed={}, stream={})".format(self.seed, self.stream)


def shifted_power_iteration(matvec: Callable[[torch.Tensor], torch.Tensor], dim: int, shift: float,
                            tol: float = 1e-10, max_iter: int = 20000,
                            rng: Optional[SeededRng] = None) -> Tuple[float, torch.Tensor]:
    """Smallest eigenpair of a symmetric operator by power iteration on (shift*I - A).

    ``shift`` must dominate the spectral radius of A so that (shift*I - A) is positive
    definite. Stops when the eigen-residual ||A v - lambda v|| drops below ``tol``.
    """
    if tol <= 0:
        raise InvalidArgument("tol must be positive")
    rng = rng or SeededRng(0)
    v = rng.unit_vector(dim)
    best_val, best_vec, best_res = float("nan"), v, float("inf")
    for _ in range(max_iter):
        av = matvec(v)
        lam = float(torch.dot(v, av))
        res = norm(av - lam * v)
        if res < best_res:
            best_val, best_vec, best_res = lam, v, res
        if res <= tol:
            return lam, v
        w = shift * v - av
        wn = torch.linalg.vector_norm(w)
        if wn == 0:
            return lam, v
        v = w / wn
    raise ConvergenceFailure("power iteration did not converge in {} iterations (residual {:.3e})"
                             .format(max_iter, best_res), best_vector=best_vec, best_value=best_val)
