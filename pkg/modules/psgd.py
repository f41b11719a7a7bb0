"""Gauss-PSGD: perturbed SGD with a repeated Gamma-descent escape test at small gradients."""
import csv
import enum
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch

from modules.core import (AssumptionWarning, BudgetExhausted, InvalidArgument, LossBounds, NoiseProfile,
                          PsgdParams, SeededRng, as_vector, norm)
from modules.objectives import Objective, population_hessian_smallest_eig
from modules.oracles import GradientOracle

logger = logging.getLogger(__name__)

DESCENT_TOL = 1e-8


class EventKind(str, enum.Enum):
    DESCENT = "DESCENT"
    ESCAPE_BEGIN = "ESCAPE_BEGIN"
    ESCAPE_ROUND = "ESCAPE_ROUND"
    ESCAPE_SUCCESS = "ESCAPE_SUCCESS"
    ESCAPE_FAIL = "ESCAPE_FAIL"
    OUTPUT = "OUTPUT"


@dataclass
class TraceEvent:
    step: int
    kind: EventKind
    payload: Dict = field(default_factory=dict)

    def as_json(self):
        return json.dumps(dict(step=self.step, kind=self.kind.value, **self.payload), sort_keys=True)


@dataclass
class StepRecord:
    step: int
    phase: str
    grad_norm_est: float
    displacement: float
    segment_id: int
    exact_grad_norm: Optional[float] = None
    f_before: Optional[float] = None
    f_after: Optional[float] = None
    nu_norm: Optional[float] = None
    in_box: bool = True


@dataclass
class RunTrace:
    events: List[TraceEvent] = field(default_factory=list)
    steps: List[StepRecord] = field(default_factory=list)
    iterates: Optional[List[torch.Tensor]] = None
    total_steps: int = 0
    accepted_steps: int = 0
    truncated: bool = False
    truncation_reason: Optional[str] = None
    left_box: bool = False

    CSV_HEADER = ("step", "kind", "grad_norm_est", "exact_grad_norm", "F_exact", "displacement", "segment_id",
                  "nu_norm")

    def emit(self, kind: EventKind, **payload):
        self.events.append(TraceEvent(self.total_steps, kind, payload))

    @property
    def function_values(self) -> List[float]:
        return [s.f_after for s in self.steps if s.f_after is not None]

    def events_of(self, kind: EventKind) -> List[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    @property
    def output_event(self) -> TraceEvent:
        out = self.events_of(EventKind.OUTPUT)
        assert len(out) == 1, "a run trace carries exactly one OUTPUT event"
        return out[0]

    def to_csv(self, path):
        def fmt(v):
            return "" if v is None else repr(v)

        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.CSV_HEADER)
            for s in self.steps:
                writer.writerow([s.step, s.phase, repr(s.grad_norm_est), fmt(s.exact_grad_norm), fmt(s.f_after),
                                 repr(s.displacement), s.segment_id, fmt(s.nu_norm)])

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for e in self.events:
                f.write(e.as_json() + "\n")


@dataclass
class EscapeOutcome:
    escaped: bool
    rounds_used: int
    steps_in_round: int
    displacement: float
    point: torch.Tensor
    max_displacement: float = 0.0


@dataclass
class CoupledTrialConfig:
    saddle: torch.Tensor
    v_min: torch.Tensor
    gamma: float
    shared_seed: SeededRng

    def __post_init__(self):
        self.v_min = as_vector(self.v_min, self.saddle.numel())
        if abs(norm(self.v_min) - 1.0) > 1e-9:
            raise InvalidArgument("v_min must be a unit vector")
        if not self.gamma > 0:
            raise InvalidArgument("gamma must be positive (x_tilde has to be a strict saddle)")

    @classmethod
    def at_saddle(cls, obj: Objective, saddle, rng: SeededRng) -> "CoupledTrialConfig":
        saddle = as_vector(saddle, obj.dim)
        lam, v = population_hessian_smallest_eig(obj, saddle, tol=1e-12)
        return cls(saddle=saddle, v_min=v / torch.linalg.vector_norm(v), gamma=-lam, shared_seed=rng)

    def with_direction(self, direction) -> "CoupledTrialConfig":
        d = as_vector(direction, self.saddle.numel())
        return CoupledTrialConfig(self.saddle, d / torch.linalg.vector_norm(d), self.gamma, self.shared_seed)


@dataclass
class CoupledOutcome:
    seq_a_escaped: bool
    seq_b_escaped: bool
    max_displacement: float
    separation: float

    @property
    def escaped(self) -> bool:
        return self.seq_a_escaped or self.seq_b_escaped


class _StepCap(Exception):
    pass


def small_gradient_trigger(g_hat: torch.Tensor, chi: float) -> bool:
    return norm(g_hat) <= 3.0 * chi


def step_budget(params: PsgdParams, bounds: LossBounds) -> float:
    """Q * U * s^2 * mu^4 / (2 chi^2 eta), the bound on the number of perturbed steps."""
    return params.Q * bounds.U * params.s ** 2 * params.mu ** 4 / (2.0 * params.chi ** 2 * params.eta)


class _Driver:
    """Shared state between the main loop and the escape rounds of one run."""

    def __init__(self, oracle: GradientOracle, params: PsgdParams, max_steps: int, diagnostics: bool,
                 store_iterates: bool):
        self.oracle = oracle
        self.obj = oracle.obj
        self.params = params
        self.max_steps = max_steps
        self.diagnostics = diagnostics
        self.trace = RunTrace(iterates=[] if store_iterates else None)
        self.segment = 0

    def query(self, x):
        if self.trace.total_steps >= self.max_steps:
            raise _StepCap()
        out = self.oracle.query(x)
        self.trace.total_steps += 1
        return out.g_hat

    def move(self, x, g, phase, anchor=None):
        eta = self.params.eta
        x_new = x - eta * g
        self.oracle.advance(eta, g)
        self.trace.accepted_steps += 1
        rec = StepRecord(self.trace.total_steps, phase, norm(g),
                         norm(x_new - anchor) if anchor is not None else 0.0, self.segment)
        if self.diagnostics:
            exact = self.obj.gradient(x)
            rec.exact_grad_norm = norm(exact)
            rec.nu_norm = norm(g - exact)
            rec.f_before = self.obj.value(x)
            rec.f_after = self.obj.value(x_new)
            rec.in_box = self.obj.in_box(x) and self.obj.in_box(x_new)
            if not rec.in_box and not self.trace.left_box:
                self.trace.left_box = True
                warnings.warn("iterate left the box where {}'s constants hold".format(self.obj.name),
                              AssumptionWarning)
        self.trace.steps.append(rec)
        if self.trace.iterates is not None:
            self.trace.iterates.append(x_new.clone())
        return x_new

    def stay(self, x, g):
        self.oracle.advance(0.0, g)


def _round(driver, x_tilde):
    params = driver.params
    x, max_disp = x_tilde, 0.0
    for k in range(1, params.Gamma + 1):
        g = driver.query(x)
        x = driver.move(x, g, "escape", anchor=x_tilde)
        disp = norm(x - x_tilde)
        max_disp = max(max_disp, disp)
        if disp >= params.R:
            return EscapeOutcome(True, 1, k, disp, x, max_disp)
    return EscapeOutcome(False, 1, params.Gamma, norm(x - x_tilde), x, max_disp)


def gamma_descent(x_tilde, oracle: GradientOracle, params: PsgdParams, rng: Optional[SeededRng] = None,
                  max_steps: Optional[int] = None) -> EscapeOutcome:
    """One Gamma-descent round from ``x_tilde`` on a fresh noise stream."""
    x_tilde = as_vector(x_tilde, oracle.obj.dim)
    driver = _Driver(oracle, params, max_steps or params.Gamma, diagnostics=False, store_iterates=False)
    token = oracle.use_stream(rng) if rng is not None else None
    try:
        return _round(driver, x_tilde)
    finally:
        oracle.restore_stream(token)


def _escape(driver, x_tilde, g_norm, rng):
    params, trace = driver.params, driver.trace
    origin = trace.total_steps
    accepted = trace.accepted_steps
    f_tilde = driver.obj.value(x_tilde) if driver.diagnostics else None
    trace.emit(EventKind.ESCAPE_BEGIN, grad_norm_est=g_norm, f_tilde=f_tilde)
    best = None
    for q in range(1, params.Q + 1):
        trace.emit(EventKind.ESCAPE_ROUND, round=q)
        driver.segment += 1
        token = driver.oracle.checkpoint()
        stream = driver.oracle.use_stream(rng.substream(origin, q))
        try:
            outcome = _round(driver, x_tilde)
        finally:
            driver.oracle.restore_stream(stream)
        outcome.rounds_used = q
        if outcome.escaped:
            logger.debug("escape round %d left the R-ball after %d steps", q, outcome.steps_in_round)
            f_after = driver.obj.value(outcome.point) if driver.diagnostics else None
            trace.emit(EventKind.ESCAPE_SUCCESS, round=q, steps=outcome.steps_in_round,
                       displacement=outcome.displacement, radius=params.R, f_tilde=f_tilde, f_after=f_after)
            return outcome
        trace.emit(EventKind.ESCAPE_FAIL, round=q, displacement=outcome.displacement,
                   max_displacement=outcome.max_displacement)
        logger.debug("escape round %d failed, max displacement %.3e", q, outcome.max_displacement)
        driver.oracle.rewind(token)
        trace.accepted_steps = accepted
        best = outcome if best is None or outcome.max_displacement > best.max_displacement else best
    return EscapeOutcome(False, params.Q, params.Gamma, best.displacement, x_tilde, best.max_displacement)


def gauss_psgd(x0, oracle: GradientOracle, params: PsgdParams, max_steps: Optional[int] = None,
               rng: Optional[SeededRng] = None, diagnostics: bool = False, store_iterates: bool = False):
    """Run Gauss-PSGD from ``x0``; returns ``(x_out, trace)``.

    The run ends at the first x_tilde where all Q escape rounds fail to move R away.
    ``max_steps`` caps the total number of oracle queries (escape rounds included),
    defaulting to ten times ``step_budget``. Hitting the cap or exhausting the data
    budget ends the run with ``trace.truncated`` set.
    """
    x = as_vector(x0, oracle.obj.dim)
    if max_steps is None:
        max_steps = max(1, math.ceil(10.0 * step_budget(params, oracle.obj.bounds)))
    if max_steps < 1:
        raise InvalidArgument("max_steps must be >= 1")
    rng = rng or SeededRng(0)
    driver = _Driver(oracle, params, max_steps, diagnostics, store_iterates)
    trace = driver.trace
    if trace.iterates is not None:
        trace.iterates.append(x.clone())
    x_tilde = None
    try:
        while True:
            g = driver.query(x)
            if small_gradient_trigger(g, params.chi):
                driver.stay(x, g)
                x_tilde = x
                outcome = _escape(driver, x_tilde, norm(g), rng)
                if not outcome.escaped:
                    trace.emit(EventKind.OUTPUT, reason="converged", rounds=params.Q)
                    return x_tilde, trace
                x, x_tilde = outcome.point, None
            else:
                x = driver.move(x, g, "descent")
                trace.emit(EventKind.DESCENT, grad_norm_est=norm(g))
    except (_StepCap, BudgetExhausted) as e:
        trace.truncated = True
        if isinstance(e, BudgetExhausted):
            trace.truncation_reason = "budget-exhausted: {}".format(e)
        else:
            trace.truncation_reason = "max_steps={} reached".format(max_steps)
        warnings.warn("Gauss-PSGD run truncated ({})".format(trace.truncation_reason), AssumptionWarning)
        x_out = x_tilde if x_tilde is not None else x
        trace.emit(EventKind.OUTPUT, reason="truncated", detail=trace.truncation_reason)
        return x_out, trace


def run_coupled_escape_trial(cfg: CoupledTrialConfig, obj: Objective, noise: NoiseProfile,
                             params: PsgdParams) -> CoupledOutcome:
    """Two perturbed sequences from the saddle sharing zeta_t and the part of xi_t orthogonal to
    v_min, with opposite components along v_min."""
    d = obj.dim
    v = cfg.v_min
    rng = cfg.shared_seed
    xa, xb = cfg.saddle.clone(), cfg.saddle.clone()
    esc_a = esc_b = False
    max_disp, sep = 0.0, 0.0
    zeta_std = noise.sigma / math.sqrt(d)
    for _ in range(params.Gamma):
        zeta = rng.normal(d, std=zeta_std) if zeta_std > 0 else torch.zeros(d, dtype=xa.dtype)
        xi = rng.normal(d, std=noise.r) if noise.r > 0 else torch.zeros(d, dtype=xa.dtype)
        xi_b = xi - 2.0 * torch.dot(v, xi) * v
        xa = xa - params.eta * (obj.gradient(xa) + zeta + xi)
        xb = xb - params.eta * (obj.gradient(xb) + zeta + xi_b)
        da, db = norm(xa - cfg.saddle), norm(xb - cfg.saddle)
        max_disp = max(max_disp, da, db)
        sep = max(sep, norm(xa - xb))
        esc_a = esc_a or da >= params.R
        esc_b = esc_b or db >= params.R
        if esc_a and esc_b:
            break
    return CoupledOutcome(esc_a, esc_b, max_disp, sep)


def max_curvature_direction(obj: Objective, x) -> torch.Tensor:
    """Unit eigenvector of the largest Hessian eigenvalue at ``x``."""
    x = as_vector(x, obj.dim)
    _, vecs = torch.linalg.eigh(obj.hessian(x))
    return vecs[:, -1]


@dataclass
class TraceAudit:
    descent_checked: int
    descent_violations: int
    segment_violations: int
    out_of_box_steps: int
    escape_successes: int
    escape_radius_violations: int
    escape_decrease_fraction: Optional[float]
    step_budget_constant: float
    step_budget_guard: float
    nu_exceed_fraction: Optional[float]
    output_events: int

    @property
    def passed(self) -> bool:
        return (self.descent_violations == 0 and self.segment_violations == 0
                and self.escape_radius_violations == 0 and self.output_events == 1)

    def as_dict(self):
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def audit_trace(trace: RunTrace, params: PsgdParams, bounds: LossBounds) -> TraceAudit:
    """Check a finished run against the descent inequality, the escape radius and the step budget.

    The descent inequality F(x_t) - F(x_{t-1}) <= -eta/2 |grad F|^2 + eta/2 |nu|^2 is checked
    per step and summed over each contiguous segment, on steps that stay inside the box.
    """
    eta = params.eta
    checked = violations = outside = 0
    segments: Dict[int, List[float]] = {}
    nu_hits = nu_total = 0
    for s in trace.steps:
        if s.f_before is None:
            continue
        nu_total += 1
        nu_hits += int(s.nu_norm > params.chi)
        if not s.in_box:
            outside += 1
            segments.setdefault(s.segment_id, [0.0, 0.0, 1.0])[2] = 0.0
            continue
        lhs = s.f_after - s.f_before
        rhs = -0.5 * eta * s.exact_grad_norm ** 2 + 0.5 * eta * s.nu_norm ** 2
        checked += 1
        violations += int(lhs > rhs + DESCENT_TOL)
        acc = segments.setdefault(s.segment_id, [0.0, 0.0, 1.0])
        acc[0] += lhs
        acc[1] += rhs
    seg_viol = sum(1 for lhs, rhs, ok in segments.values() if ok and lhs > rhs + DESCENT_TOL)

    successes = trace.events_of(EventKind.ESCAPE_SUCCESS)
    radius_viol = sum(1 for e in successes if not e.payload["displacement"] >= params.R)
    decreases = [e.payload["f_tilde"] - e.payload["f_after"] for e in successes
                 if e.payload.get("f_tilde") is not None]
    frac = sum(1 for dec in decreases if dec >= params.Phi) / len(decreases) if decreases else None

    const = trace.total_steps * eta * params.chi ** 2 / bounds.U
    return TraceAudit(descent_checked=checked, descent_violations=violations, segment_violations=seg_viol,
                      out_of_box_steps=outside, escape_successes=len(successes),
                      escape_radius_violations=radius_viol, escape_decrease_fraction=frac,
                      step_budget_constant=const, step_budget_guard=13.0 * params.s ** 2 * params.mu ** 4,
                      nu_exceed_fraction=nu_hits / nu_total if nu_total else None,
                      output_events=len(trace.events_of(EventKind.OUTPUT)))
