"""Private model selection over an iterate list, and its comparison with the direct output."""
import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch

from modules.core import (ConvergenceFailure, InvalidArgument, LossBounds, SeededRng, as_vector, norm,
                          shifted_power_iteration)
from modules.objectives import batch_gradients, sample_batch
from modules.oracles import ClientPool
from modules.privacy import Phase, PrivacyBudget, PrivacyLedger, selection_noise_variances
from modules.verify import SospReport, dense_smallest_eig

logger = logging.getLogger(__name__)

POWER_TOL = 1e-8


@dataclass
class CandidateSet:
    points: List[torch.Tensor]

    def __post_init__(self):
        if not self.points:
            raise InvalidArgument("a candidate set needs at least one point")

    @property
    def T(self) -> int:
        return len(self.points)

    @classmethod
    def from_iterates(cls, iterates: Sequence[torch.Tensor], stride: int = 1) -> "CandidateSet":
        """Every ``stride``-th iterate, always keeping the last one."""
        if stride < 1:
            raise InvalidArgument("candidate stride must be >= 1")
        points = list(iterates[::stride])
        if len(iterates) and (len(iterates) - 1) % stride:
            points.append(iterates[-1])
        return cls(points)


@dataclass(frozen=True)
class SelectionThresholds:
    grad_threshold: float
    eig_threshold: float

    def __post_init__(self):
        if not self.grad_threshold > 0:
            raise InvalidArgument("grad_threshold must be positive")


def build_thresholds(alpha: float, bounds: LossBounds, m: int, n: int, T: int, d: int,
                     privacy: Optional[PrivacyBudget], omega_prime: float) -> SelectionThresholds:
    """Acceptance thresholds for the noised aggregate gradient norm and smallest eigenvalue.

    ``privacy=None`` drops the privacy terms (the epsilon -> infinity limit).
    """
    if alpha <= 0 or m < 1 or n < 1 or T < 1 or d < 1:
        raise InvalidArgument("alpha, m, n, T and d must be positive")
    if not 0 < omega_prime < 1:
        raise InvalidArgument("omega_prime must lie in (0, 1)")
    log_term = math.log(8.0 * d / omega_prime)
    if m * n < 4.0 / 9.0 * log_term:
        raise InvalidArgument("m*n = {} is below (4/9) ln(8d/omega') = {:.4g}".format(m * n, 4.0 / 9.0 * log_term))
    G, M, rho = bounds.G, bounds.M, bounds.rho
    grad = alpha + G * log_term / math.sqrt(m * n)
    eig = math.sqrt(rho * alpha) + M * math.sqrt(log_term / (m * n))
    if privacy is not None:
        scale = math.sqrt(m) * n * privacy.epsilon
        grad += G * math.sqrt(d * T * privacy.log_inv_delta * math.log(16.0 / omega_prime)) / scale
        eig += M * d * math.sqrt(T * privacy.log_inv_delta * math.log(32.0 / omega_prime)) / scale
    return SelectionThresholds(grad_threshold=grad, eig_threshold=-eig)


def passes_thresholds(noised_grad_norm, noised_lambda_min, thresholds):
    return noised_grad_norm <= thresholds.grad_threshold and noised_lambda_min >= thresholds.eig_threshold


def symmetric_gaussian(d, std, rng):
    """Upper triangle (diagonal included) i.i.d. N(0, std^2), mirrored below the diagonal."""
    upper = torch.triu(rng.normal(d, d, std=std))
    return upper + torch.triu(upper, diagonal=1).T


def noised_smallest_eig(h):
    """(lambda_min, solver) of a symmetric matrix: capped power iteration, dense fallback."""
    d = h.shape[0]
    # Gershgorin bound on the spectral radius
    shift = float(torch.max(torch.sum(torch.abs(h), dim=1))) + 1.0
    try:
        lam, _ = shifted_power_iteration(lambda v: h @ v, d, shift, tol=POWER_TOL, max_iter=10 * d,
                                         rng=SeededRng(0, 5))
        return lam, "power"
    except ConvergenceFailure:
        lam, _ = dense_smallest_eig(h)
        return lam, "dense"


@dataclass
class SelectionRow:
    candidate_index: int
    noised_grad_norm: float
    noised_lambda_min: float
    grad_threshold: float
    eig_threshold: float
    passed: bool
    solver: str

    HEADER = ("candidate_index", "noised_grad_norm", "noised_lambda_min", "grad_threshold", "eig_threshold",
              "passed", "solver")

    def as_row(self):
        return [self.candidate_index, repr(self.noised_grad_norm), repr(self.noised_lambda_min),
                repr(self.grad_threshold), repr(self.eig_threshold), int(self.passed), self.solver]


@dataclass
class SelectionResult:
    selected: Optional[torch.Tensor]
    index: Optional[int]
    thresholds: SelectionThresholds
    rows: List[SelectionRow] = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(SelectionRow.HEADER)
            for row in self.rows:
                writer.writerow(row.as_row())


def private_select(cands: CandidateSet, pool: ClientPool, bounds: LossBounds, alpha: float,
                   privacy: Optional[PrivacyBudget], omega_prime: float, rng: SeededRng,
                   holdout_size: Optional[int] = None, ledger: Optional[PrivacyLedger] = None,
                   c1: float = 1.0, c2: float = 1.0, clip: bool = True) -> SelectionResult:
    """Return the first candidate whose noised aggregate gradient and Hessian pass both thresholds.

    ``pool`` holds the held-out budgets; each client draws its evaluation set once and
    reuses it for every candidate, so a held-out sample is touched at most T times.
    """
    obj = pool.obj
    d, m, T = obj.dim, pool.m, cands.T
    n = holdout_size if holdout_size is not None else min(c.budget.total for c in pool.clients)
    thresholds = build_thresholds(alpha, bounds, m, n, T, d, privacy, omega_prime)
    if ledger is not None:
        ledger.declare_selection_rounds(T)
    grad_cal = hess_cal = None
    if privacy is not None:
        grad_cal, hess_cal = selection_noise_variances(bounds.G, bounds.M, n, T, privacy, d, c1, c2)
    held_out = [sample_batch(obj, client.budget, n, client.rng) for client in pool.clients]
    result = SelectionResult(None, None, thresholds)

    for t, point in enumerate(cands.points):
        x = as_vector(point, d)
        grads, hessians = [], []
        for client, batch in zip(pool.clients, held_out):
            if ledger is not None:
                ledger.record_touch(batch.ids, Phase.SELECT)
            noise_rng = rng.substream(t, client.index)
            shift = client.shift if bool(torch.any(client.shift != 0)) else None
            g = batch_gradients(obj, x, batch, clip=bounds.G if clip else None, shift=shift).mean(0)
            h = obj.sample_hessian_mean(x, batch.payload)
            if privacy is not None:
                g = g + grad_cal.sample(noise_rng, d)
                h = h + symmetric_gaussian(d, hess_cal.std, noise_rng)
                if ledger is not None:
                    ledger.record_release(t, grad_cal, privacy, client=client.index)
                    ledger.record_release(t, hess_cal, privacy, client=client.index)
            grads.append(g)
            hessians.append(h)
        g_bar = torch.stack(grads).sum(0) / m
        h_bar = torch.stack(hessians).sum(0) / m
        lam, solver = noised_smallest_eig(h_bar)
        g_norm = norm(g_bar)
        ok = passes_thresholds(g_norm, lam, thresholds)
        result.rows.append(SelectionRow(t, g_norm, lam, thresholds.grad_threshold, thresholds.eig_threshold,
                                        ok, solver))
        if ok:
            result.selected, result.index = x, t
            logger.debug("candidate %d selected (|g|=%.3e, lambda_min=%.3e)", t, g_norm, lam)
            break
    return result


@dataclass
class PairedResult:
    d: int
    seed: int
    direct: SospReport
    selected: Optional[SospReport]


@dataclass
class DegradationRow:
    d: int
    runs: int
    direct_pass_fraction: float
    direct_median_grad_norm: float
    direct_median_lambda_min: float
    selection_non_sosp_fraction: float
    selection_no_pick_fraction: float
    selection_failure_fraction: float
    selection_median_grad_norm: Optional[float]
    selection_median_lambda_min: Optional[float]

    HEADER = ("d", "runs", "direct_pass_fraction", "direct_median_grad_norm", "direct_median_lambda_min",
              "selection_non_sosp_fraction", "selection_no_pick_fraction", "selection_failure_fraction",
              "selection_median_grad_norm", "selection_median_lambda_min")

    def as_row(self):
        return [getattr(self, k) for k in self.HEADER]


def selection_degradation_report(runs: Sequence[PairedResult]) -> List[DegradationRow]:
    """Per-dimension comparison of the direct output with the privately selected point."""
    by_d = defaultdict(list)
    for run in runs:
        by_d[run.d].append(run)
    rows = []
    for d in sorted(by_d):
        group = by_d[d]
        k = len(group)
        picked = [r.selected for r in group if r.selected is not None]
        non_sosp = sum(1 for rep in picked if not rep.passes)
        no_pick = k - len(picked)
        rows.append(DegradationRow(
            d=d, runs=k,
            direct_pass_fraction=sum(r.direct.passes for r in group) / k,
            direct_median_grad_norm=float(np.median([r.direct.grad_norm for r in group])),
            direct_median_lambda_min=float(np.median([r.direct.lambda_min for r in group])),
            selection_non_sosp_fraction=non_sosp / k,
            selection_no_pick_fraction=no_pick / k,
            selection_failure_fraction=(non_sosp + no_pick) / k,
            selection_median_grad_norm=float(np.median([p.grad_norm for p in picked])) if picked else None,
            selection_median_lambda_min=float(np.median([p.lambda_min for p in picked])) if picked else None))
    return rows
