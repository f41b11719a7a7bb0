"""Perturbed gradient oracles: plain, Gaussian, Ada-DP-SPIDER and its distributed form."""
import csv
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch

from modules.core import (InvalidArgument, LossBounds, NoiseProfile, OracleStateError, PsgdParams,
                          SeededRng, as_vector, norm)
from modules.objectives import (DatasetBudget, Objective, batch_gradients, clip_rows, client_shifts,
                                sample_batch)
from modules.privacy import (NoiseCalibration, Phase, PrivacyBudget, PrivacyLedger, o1_noise_variance,
                             o2_noise_variance)

logger = logging.getLogger(__name__)

DRIFT_REWIND_MODES = ("actual-queries", "accepted-path")


@dataclass
class OracleOutput:
    g_hat: torch.Tensor
    used_O1: bool
    samples_used: int
    noise: Optional[NoiseCalibration] = None
    branch: str = "O1"
    step_dist: float = 0.0

    def __post_init__(self):
        if not torch.isfinite(self.g_hat).all():
            raise OracleStateError("oracle produced a non-finite estimate")


@dataclass(frozen=True)
class ScheduleParams:
    b1: int
    b2: int
    kappa: float
    kappa_branches: Tuple[float, float] = (0.0, 0.0)
    clamped: Tuple[bool, bool] = (False, False)

    def __post_init__(self):
        if self.b1 < 1 or self.b2 < 1:
            raise InvalidArgument("batch sizes must be >= 1")
        if not self.kappa > 0:
            raise InvalidArgument("kappa must be positive")


@dataclass
class SpiderState:
    kappa: float
    b1: int
    b2: int
    drift: float = 0.0
    last_x: Optional[torch.Tensor] = None
    last_g: Optional[torch.Tensor] = None
    o1_count: int = 0
    o2_count: int = 0
    step_index: int = 0

    @classmethod
    def initial(cls, schedule: ScheduleParams) -> "SpiderState":
        # drift starts at kappa so that the first query takes the O1 branch
        return cls(kappa=schedule.kappa, b1=schedule.b1, b2=schedule.b2, drift=schedule.kappa)

    @property
    def wants_o1(self) -> bool:
        return self.drift >= self.kappa


@dataclass
class OracleTraceRow:
    t: int
    branch: str
    batch: int
    drift_before: float
    drift_post: float
    drift_after: Optional[float]
    noise_variance: float
    est_error: Optional[float]
    step_dist: float = 0.0

    HEADER = ("t", "branch", "batch", "drift_before", "drift_post", "drift_after", "noise_variance", "est_error",
              "step_dist")

    def as_row(self):
        return [self.t, self.branch, self.batch, repr(self.drift_before), repr(self.drift_post),
                "" if self.drift_after is None else repr(self.drift_after),
                repr(self.noise_variance), "" if self.est_error is None else repr(self.est_error),
                repr(self.step_dist)]


def derive_schedule(bounds: LossBounds, params: PsgdParams, n: int, m: int, d: int,
                    privacy: Optional[PrivacyBudget], kappa_override: Optional[float] = None,
                    b1_override: Optional[int] = None, b2_override: Optional[int] = None) -> ScheduleParams:
    """b1, b2 and the drift threshold; the distributed forms reduce to the centralized ones at m = 1.

    Overridden batch sizes replace the formulas but are still clamped to [1, n].
    """
    if n < 1 or m < 1 or d < 1:
        raise InvalidArgument("n, m and d must be >= 1")
    G, M, rho, U = bounds.G, bounds.M, bounds.rho, bounds.U
    k_stat = G ** 1.5 * U ** 0.5 * rho ** 0.5 / (M ** 2.5 * (m * n) ** 0.5)
    if privacy is None:
        k_priv = 0.0
    else:
        k_priv = (G ** (14.0 / 15.0) * d ** 0.4 * U ** 0.8 * rho ** (8.0 / 15.0)
                  / (M ** (34.0 / 15.0) * (math.sqrt(m) * n * privacy.epsilon) ** 0.8))
    kappa = max(k_stat, k_priv) if kappa_override is None else float(kappa_override)
    b1_raw = math.ceil(n * kappa / (2.0 * U * params.eta)) if b1_override is None else int(b1_override)
    b2_raw = math.ceil(n * params.eta * params.chi ** 2 / (2.0 * U)) if b2_override is None else int(b2_override)
    b1 = min(max(b1_raw, 1), n)
    b2 = min(max(b2_raw, 1), n)
    if (b1, b2) != (b1_raw, b2_raw):
        logger.info("batch sizes clamped to [1, %d]: b1 %d -> %d, b2 %d -> %d", n, b1_raw, b1, b2_raw, b2)
    return ScheduleParams(b1=b1, b2=b2, kappa=kappa, kappa_branches=(k_stat, k_priv),
                          clamped=(b1 != b1_raw, b2 != b2_raw))


def schedule_noise_profile(bounds: LossBounds, schedule: ScheduleParams, d: int, m: int,
                           privacy: Optional[PrivacyBudget], c1: float = 1.0, c2: float = 1.0) -> NoiseProfile:
    """Oracle noise implied by a schedule, in the form of the SPIDER error bounds."""
    G, M, kappa = bounds.G, bounds.M, schedule.kappa
    log_d = max(1.0, math.log(d))
    sigma2 = log_d ** 2 * (G ** 2 / schedule.b1 + M ** 2 * kappa / schedule.b2) / m
    r2 = 0.0
    if privacy is not None:
        r2 = privacy.log_inv_delta * (c1 * G ** 2 / schedule.b1 ** 2
                                      + c2 * M ** 2 * kappa / schedule.b2 ** 2) / (m * privacy.epsilon ** 2)
    return NoiseProfile(sigma=math.sqrt(sigma2), r=math.sqrt(r2), dim=d)


def plain_oracle(x, obj: Objective, budget: DatasetBudget, b: int, noise_r: float, rng: SeededRng,
                 clip: Optional[float] = None, ledger: Optional[PrivacyLedger] = None) -> OracleOutput:
    """Mini-batch gradient plus isotropic Gaussian noise of per-coordinate std ``noise_r``."""
    x = as_vector(x, obj.dim)
    batch = sample_batch(obj, budget, b, rng)
    if ledger is not None:
        ledger.record_touch(batch.ids, Phase.TRAIN)
    g = batch_gradients(obj, x, batch, clip=clip).mean(0)
    if noise_r > 0:
        g = g + rng.normal(obj.dim, std=noise_r)
    return OracleOutput(g, used_O1=True, samples_used=b, branch="PLAIN")


def _local_estimate(obj: Objective, x_curr: torch.Tensor, state: SpiderState, last_g: Optional[torch.Tensor],
                    use_o1: bool, budget: DatasetBudget, privacy: Optional[PrivacyBudget], rng: SeededRng,
                    c1: float, c2: float, clip: bool, ledger: Optional[PrivacyLedger],
                    client: Optional[int] = None, shift: Optional[torch.Tensor] = None):
    G, M = obj.bounds.G, obj.bounds.M
    if use_o1:
        batch = sample_batch(obj, budget, state.b1, rng)
        if ledger is not None:
            ledger.record_touch(batch.ids, Phase.TRAIN)
        est = batch_gradients(obj, x_curr, batch, clip=G if clip else None, shift=shift).mean(0)
        calib = o1_noise_variance(G, state.b1, privacy, c1) if privacy is not None else None
        step_dist = 0.0
    else:
        if state.last_x is None or last_g is None:
            raise OracleStateError("O2 branch requested before any O1 anchor")
        step_dist = norm(x_curr - state.last_x)
        batch = sample_batch(obj, budget, state.b2, rng)
        if ledger is not None:
            ledger.record_touch(batch.ids, Phase.TRAIN)
        diffs = obj.sample_gradients(x_curr, batch.payload) - obj.sample_gradients(state.last_x, batch.payload)
        if clip and step_dist > 0:
            diffs = clip_rows(diffs, M * step_dist)
        est = last_g + diffs.mean(0)
        calib = o2_noise_variance(M, state.b2, privacy, step_dist, c2) if privacy is not None else None
    if calib is not None:
        est = est + calib.sample(rng, obj.dim)
        if ledger is not None:
            ledger.record_release(state.step_index, calib, privacy, client=client)
    return est, calib, len(batch), step_dist


def _commit(state, x_curr, g, use_o1):
    if use_o1:
        state.drift = 0.0
        state.o1_count += 1
    else:
        state.o2_count += 1
    state.last_x = x_curr.clone()
    state.last_g = g


def spider_step(state: SpiderState, x_curr, obj: Objective, budget: DatasetBudget,
                privacy: Optional[PrivacyBudget], rng: SeededRng, c1: float = 1.0, c2: float = 1.0,
                clip: bool = True, ledger: Optional[PrivacyLedger] = None) -> OracleOutput:
    """One Ada-DP-SPIDER query at ``x_curr``; ``privacy=None`` turns the injected noise off."""
    x_curr = as_vector(x_curr, obj.dim)
    state.step_index += 1
    use_o1 = state.wants_o1
    g, calib, used, step_dist = _local_estimate(obj, x_curr, state, state.last_g, use_o1, budget, privacy,
                                                rng, c1, c2, clip, ledger)
    _commit(state, x_curr, g, use_o1)
    return OracleOutput(g, used_O1=use_o1, samples_used=used, noise=calib,
                        branch="O1" if use_o1 else "O2", step_dist=step_dist)


def drift_update(state, eta, g_hat):
    state.drift += eta ** 2 * float(torch.dot(g_hat, g_hat))


@dataclass
class Client:
    index: int
    budget: DatasetBudget
    rng: SeededRng
    shift: torch.Tensor
    last_g: Optional[torch.Tensor] = None


class ClientPool:
    """Simulated clients advancing in lockstep, each with its own data budget and noise stream."""

    def __init__(self, obj: Objective, clients: List[Client]):
        if not clients:
            raise InvalidArgument("a client pool needs at least one client")
        self.obj = obj
        self.clients = clients

    @property
    def m(self) -> int:
        return len(self.clients)

    @classmethod
    def build(cls, obj: Objective, m: int, samples_per_client: int, rng: SeededRng, heterogeneity: float = 0.0,
              id_offset: int = 0, name: str = "train", shifts: Optional[List[torch.Tensor]] = None) -> "ClientPool":
        if m < 1:
            raise InvalidArgument("m must be >= 1")
        if shifts is None:
            shifts = client_shifts(obj.dim, m, heterogeneity, rng.substream(10 ** 6))
        elif len(shifts) != m:
            raise InvalidArgument("need one shift per client")
        clients = [Client(index=j,
                          budget=DatasetBudget(samples_per_client, id_base=id_offset + j * samples_per_client,
                                               name="{}-client{}".format(name, j)),
                          rng=rng.substream(j), shift=shifts[j])
                   for j in range(m)]
        return cls(obj, clients)

    @property
    def shifts(self) -> List[torch.Tensor]:
        return [c.shift for c in self.clients]

    @property
    def id_span(self) -> int:
        return sum(c.budget.total for c in self.clients)

    def consumed(self) -> int:
        return sum(c.budget.consumed for c in self.clients)


def distributed_spider_step(pool: ClientPool, state: SpiderState, x_curr, privacy: Optional[PrivacyBudget],
                            c1: float = 1.0, c2: float = 1.0, clip: bool = True,
                            ledger: Optional[PrivacyLedger] = None) -> OracleOutput:
    """Every client builds its local estimate with local noise; the server averages.

    The branch is decided once from the shared drift and broadcast to all clients.
    """
    obj = pool.obj
    x_curr = as_vector(x_curr, obj.dim)
    state.step_index += 1
    use_o1 = state.wants_o1
    locals_, used, calib, step_dist = [], 0, None, 0.0
    for client in pool.clients:
        shift = client.shift if bool(torch.any(client.shift != 0)) else None
        g_j, calib, n_j, step_dist = _local_estimate(obj, x_curr, state, client.last_g, use_o1, client.budget,
                                                     privacy, client.rng, c1, c2, clip, ledger,
                                                     client=client.index, shift=shift)
        locals_.append(g_j)
        used += n_j
    for client, g_j in zip(pool.clients, locals_):
        client.last_g = g_j
    g = torch.stack(locals_).sum(0) / pool.m
    _commit(state, x_curr, g, use_o1)
    return OracleOutput(g, used_O1=use_o1, samples_used=used, noise=calib,
                        branch="O1" if use_o1 else "O2", step_dist=step_dist)


class GradientOracle:
    """Interface used by the PSGD driver.

    ``query`` returns the perturbed estimate at a point; the driver then calls
    ``advance`` with the step it actually took (eta = 0 when it did not move).
    """

    def __init__(self, obj: Objective, track_error: bool = False):
        self.obj = obj
        self.track_error = track_error
        self.trace: List[OracleTraceRow] = []
        self.queries = 0

    def _estimate(self, x: torch.Tensor) -> OracleOutput:
        raise NotImplementedError

    def drift(self) -> float:
        return 0.0

    def query(self, x) -> OracleOutput:
        x = as_vector(x, self.obj.dim)
        drift_before = self.drift()
        out = self._estimate(x)
        self.queries += 1
        err = norm(out.g_hat - self.obj.gradient(x)) if self.track_error else None
        self.trace.append(OracleTraceRow(self.queries, out.branch, out.samples_used, drift_before, self.drift(),
                                         None, out.noise.variance if out.noise is not None else 0.0, err,
                                         out.step_dist))
        return out

    def advance(self, eta: float, g_hat: torch.Tensor):
        if self.trace:
            self.trace[-1].drift_after = self.drift()

    def checkpoint(self):
        return None

    def rewind(self, token):
        pass

    def use_stream(self, rng: SeededRng):
        """Switch the noise stream; returns a token for ``restore_stream``."""
        return None

    def restore_stream(self, token):
        pass

    def samples_used(self) -> int:
        return sum(row.batch for row in self.trace)

    def trace_to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(OracleTraceRow.HEADER)
            for row in self.trace:
                writer.writerow(row.as_row())


class _SingleStreamMixin:
    rng: SeededRng

    def use_stream(self, rng):
        token, self.rng = self.rng, rng
        return token

    def restore_stream(self, token):
        if token is not None:
            self.rng = token


class GaussianOracle(_SingleStreamMixin, GradientOracle):
    """Exact population gradient plus zeta ~ N(0, sigma^2/d I) and xi ~ N(0, r^2 I)."""

    def __init__(self, obj: Objective, r: float, rng: SeededRng, sigma: float = 0.0, track_error: bool = False):
        super(GaussianOracle, self).__init__(obj, track_error)
        if r < 0 or sigma < 0:
            raise InvalidArgument("noise scales must be non-negative")
        self.r, self.sigma, self.rng = float(r), float(sigma), rng

    @property
    def noise_profile(self) -> NoiseProfile:
        return NoiseProfile(self.sigma, self.r, self.obj.dim)

    def _estimate(self, x):
        g = self.obj.gradient(x)
        if self.sigma > 0:
            g = g + self.rng.normal(self.obj.dim, std=self.sigma / math.sqrt(self.obj.dim))
        if self.r > 0:
            g = g + self.rng.normal(self.obj.dim, std=self.r)
        return OracleOutput(g, used_O1=True, samples_used=0, branch="GAUSS")


class SpiderOracle(_SingleStreamMixin, GradientOracle):
    """Stateful Ada-DP-SPIDER stream over a single dataset budget."""

    def __init__(self, obj: Objective, schedule: ScheduleParams, budget: DatasetBudget, rng: SeededRng,
                 privacy: Optional[PrivacyBudget] = None, c1: float = 1.0, c2: float = 1.0, clip: bool = True,
                 ledger: Optional[PrivacyLedger] = None, track_error: bool = False,
                 rewind_mode: str = "actual-queries"):
        super(SpiderOracle, self).__init__(obj, track_error)
        if rewind_mode not in DRIFT_REWIND_MODES:
            raise InvalidArgument("drift_rewind_mode must be one of {}".format(DRIFT_REWIND_MODES))
        self.state = SpiderState.initial(schedule)
        self.schedule = schedule
        self.budget, self.rng = budget, rng
        self.privacy, self.c1, self.c2, self.clip, self.ledger = privacy, c1, c2, clip, ledger
        self.rewind_mode = rewind_mode

    def use_stream(self, rng):
        # the centralized stream is the one client 0 would get in a one-client pool
        token, self.rng = self.rng, rng.substream(0)
        return token

    def drift(self):
        return self.state.drift

    def _estimate(self, x):
        return spider_step(self.state, x, self.obj, self.budget, self.privacy, self.rng,
                           self.c1, self.c2, self.clip, self.ledger)

    def advance(self, eta, g_hat):
        drift_update(self.state, eta, g_hat)
        super(SpiderOracle, self).advance(eta, g_hat)

    def checkpoint(self):
        return self.state.drift

    def rewind(self, token):
        # last_x / last_g keep following the actual query stream in both modes
        if self.rewind_mode == "accepted-path" and token is not None:
            self.state.drift = token


class DistributedSpiderOracle(SpiderOracle):
    def __init__(self, pool: ClientPool, schedule: ScheduleParams, privacy: Optional[PrivacyBudget] = None,
                 c1: float = 1.0, c2: float = 1.0, clip: bool = True, ledger: Optional[PrivacyLedger] = None,
                 track_error: bool = False, rewind_mode: str = "actual-queries"):
        super(DistributedSpiderOracle, self).__init__(pool.obj, schedule, pool.clients[0].budget,
                                                      pool.clients[0].rng, privacy, c1, c2, clip, ledger,
                                                      track_error, rewind_mode)
        self.pool = pool

    def _estimate(self, x):
        return distributed_spider_step(self.pool, self.state, x, self.privacy, self.c1, self.c2, self.clip,
                                       self.ledger)

    def use_stream(self, rng):
        token = [client.rng for client in self.pool.clients]
        for client in self.pool.clients:
            client.rng = rng.substream(client.index)
        return token

    def restore_stream(self, token):
        if token is not None:
            for client, rng in zip(self.pool.clients, token):
                client.rng = rng


@dataclass
class DriftAudit:
    o1_events: int
    o2_events: int
    reset_violations: int
    trigger_violations: int

    @property
    def passed(self) -> bool:
        return self.reset_violations == 0 and self.trigger_violations == 0

    def as_dict(self):
        return dict(o1_events=self.o1_events, o2_events=self.o2_events, reset_violations=self.reset_violations,
                    trigger_violations=self.trigger_violations, passed=self.passed)


def audit_drift(rows: List[OracleTraceRow], kappa: float) -> DriftAudit:
    """Drift is 0 right after every O1 event, and O1 fires (after the first query) only once drift >= kappa."""
    o1 = [row for row in rows if row.branch == "O1"]
    o2 = [row for row in rows if row.branch == "O2"]
    resets = sum(1 for row in o1 if row.drift_post != 0.0)
    triggers = sum(1 for row in o1[1:] if not row.drift_before >= kappa)
    triggers += sum(1 for row in o2 if row.drift_before >= kappa)
    return DriftAudit(len(o1), len(o2), resets, triggers)


def o1_frequency_ratio(o1_count, U, eta, kappa):
    # realized O1 count over U*eta/kappa
    return o1_count * kappa / (U * eta)


def sample_usage_ratio(schedule, o1_count, o2_count, n):
    return (schedule.b1 * o1_count + schedule.b2 * o2_count) / n
