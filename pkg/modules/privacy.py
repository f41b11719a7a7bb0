import csv
import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import torch

from modules.core import DTYPE, AccountingViolation, InvalidArgument, SeededRng

logger = logging.getLogger(__name__)


class Mechanism(str, enum.Enum):
    O1 = "O1"
    O2 = "O2"
    SELECT_GRAD = "SELECT_GRAD"
    SELECT_HESS = "SELECT_HESS"


class Phase(str, enum.Enum):
    TRAIN = "TRAIN"
    SELECT = "SELECT"


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise InvalidArgument("epsilon must be positive, got {}".format(self.epsilon))
        if not 0 < self.delta < 1:
            raise InvalidArgument("delta must lie in (0, 1), got {}".format(self.delta))

    @property
    def log_inv_delta(self) -> float:
        return math.log(1.0 / self.delta)


@dataclass(frozen=True)
class NoiseCalibration:
    variance: float
    mechanism: Mechanism
    sensitivity: Optional[float] = None
    inputs: Dict[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.variance >= 0:
            raise InvalidArgument("variance must be non-negative")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def sample(self, rng: SeededRng, *shape: int) -> torch.Tensor:
        if self.variance == 0:
            return torch.zeros(*shape, dtype=DTYPE)
        return rng.normal(*shape, std=self.std)


def gaussian_sigma(sensitivity, budget):
    """Classical Gaussian mechanism scale: Delta * sqrt(2 ln(1.25 / delta)) / epsilon."""
    if sensitivity < 0:
        raise InvalidArgument("sensitivity must be non-negative")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / budget.delta)) / budget.epsilon


def gaussian_constant(delta):
    """The c making c * X^2 ln(1/delta) / (b eps)^2 equal gaussian_sigma(2X/b)^2."""
    return 8.0 * math.log(1.25 / delta) / math.log(1.0 / delta)


def resolve_constant(c, budget):
    if c == "gaussian":
        if budget is None:
            raise InvalidArgument("the 'gaussian' constant needs a privacy budget")
        return gaussian_constant(budget.delta)
    c = float(c)
    if c <= 0:
        raise InvalidArgument("noise constants must be positive")
    return c


def o1_sensitivity(G, b1):
    return 2.0 * G / b1


def o2_sensitivity(M, b2, step_dist):
    return 2.0 * M * step_dist / b2


def o1_noise_variance(G: float, b1: int, budget: PrivacyBudget, c1: float = 1.0) -> NoiseCalibration:
    if b1 < 1:
        raise InvalidArgument("b1 must be >= 1")
    variance = c1 * G ** 2 * budget.log_inv_delta / (b1 ** 2 * budget.epsilon ** 2)
    return NoiseCalibration(variance, Mechanism.O1, o1_sensitivity(G, b1),
                            inputs=dict(G=G, b=b1, epsilon=budget.epsilon, delta=budget.delta, c=c1))


def o2_noise_variance(M: float, b2: int, budget: PrivacyBudget, step_dist: float,
                      c2: float = 1.0) -> NoiseCalibration:
    if b2 < 1:
        raise InvalidArgument("b2 must be >= 1")
    if step_dist < 0:
        raise InvalidArgument("step_dist must be non-negative")
    variance = c2 * M ** 2 * budget.log_inv_delta * step_dist ** 2 / (b2 ** 2 * budget.epsilon ** 2)
    return NoiseCalibration(variance, Mechanism.O2, o2_sensitivity(M, b2, step_dist),
                            inputs=dict(M=M, b=b2, step_dist=step_dist, epsilon=budget.epsilon,
                                        delta=budget.delta, c=c2))


def selection_noise_variances(G, M, n, T, budget, d, c1=1.0, c2=1.0):
    if n < 1 or T < 1 or d < 1:
        raise InvalidArgument("n, T and d must be >= 1")
    denom = n ** 2 * budget.epsilon ** 2
    grad = c1 * G ** 2 * T * budget.log_inv_delta / denom
    hess = c2 * M ** 2 * d * T * budget.log_inv_delta / denom
    common = dict(n=n, T=T, d=d, epsilon=budget.epsilon, delta=budget.delta)
    return (NoiseCalibration(grad, Mechanism.SELECT_GRAD, inputs=dict(common, G=G, c=c1)),
            NoiseCalibration(hess, Mechanism.SELECT_HESS, inputs=dict(common, M=M, c=c2)))


def recompute_variance(mechanism, inputs):
    """Re-evaluate a logged calibration from its recorded inputs."""
    budget = PrivacyBudget(inputs["epsilon"], inputs["delta"])
    if mechanism == Mechanism.O1:
        return o1_noise_variance(inputs["G"], int(inputs["b"]), budget, inputs["c"]).variance
    if mechanism == Mechanism.O2:
        return o2_noise_variance(inputs["M"], int(inputs["b"]), budget, inputs["step_dist"], inputs["c"]).variance
    grad, hess = selection_noise_variances(inputs.get("G", 1.0), inputs.get("M", 1.0), int(inputs["n"]),
                                           int(inputs["T"]), budget, int(inputs["d"]),
                                           inputs.get("c", 1.0), inputs.get("c", 1.0))
    return grad.variance if mechanism == Mechanism.SELECT_GRAD else hess.variance


@dataclass(frozen=True)
class Release:
    step: int
    mechanism: Mechanism
    sensitivity: Optional[float]
    variance: float
    epsilon: float
    delta: float
    client: Optional[int] = None
    inputs: Dict[str, float] = field(default_factory=dict, compare=False)


@dataclass
class LedgerAudit:
    max_train_touch: int
    max_select_touch: int
    select_limit: Optional[int]
    overlap: int
    calibration_mismatches: int
    violations: List[str]

    @property
    def passed(self) -> bool:
        return not self.violations

    def as_dict(self):
        return dict(max_train_touch=self.max_train_touch, max_select_touch=self.max_select_touch,
                    select_limit=self.select_limit, overlap=self.overlap,
                    calibration_mismatches=self.calibration_mismatches,
                    violations=list(self.violations), passed=self.passed)


class PrivacyLedger:
    """Append-only record of noised releases and per-sample touch counts."""

    def __init__(self, selection_rounds: Optional[int] = None):
        self._releases: List[Release] = []
        self._touches = {Phase.TRAIN: Counter(), Phase.SELECT: Counter()}
        self.selection_rounds = selection_rounds
        self.closed = False

    @property
    def releases(self):
        return tuple(self._releases)

    def touch_count(self, sample_id: int, phase: Phase = Phase.TRAIN) -> int:
        return self._touches[Phase(phase)][int(sample_id)]

    def declare_selection_rounds(self, T: int):
        if T < 1:
            raise InvalidArgument("selection rounds must be >= 1")
        self.selection_rounds = int(T)

    def record_touch(self, sample_ids: Iterable[int], phase: Phase):
        if self.closed:
            raise AccountingViolation("ledger is closed")
        phase = Phase(phase)
        if isinstance(sample_ids, torch.Tensor):
            sample_ids = sample_ids.tolist()
        ids = [int(i) for i in sample_ids]
        counts = self._touches[phase]
        if phase == Phase.TRAIN:
            if len(set(ids)) != len(ids):
                raise AccountingViolation("duplicate sample ids inside one training batch")
            reused = [i for i in ids if counts[i] > 0]
            if reused:
                raise AccountingViolation("training sample {} touched twice".format(reused[0]))
        counts.update(ids)

    def record_release(self, step: int, calibration: NoiseCalibration, budget: PrivacyBudget,
                       client: Optional[int] = None):
        if self.closed:
            raise AccountingViolation("ledger is closed")
        self._releases.append(Release(step=int(step), mechanism=calibration.mechanism,
                                      sensitivity=calibration.sensitivity, variance=calibration.variance,
                                      epsilon=budget.epsilon, delta=budget.delta, client=client,
                                      inputs=dict(calibration.inputs)))

    def audit(self) -> LedgerAudit:
        train, select = self._touches[Phase.TRAIN], self._touches[Phase.SELECT]
        max_train = max(train.values(), default=0)
        max_select = max(select.values(), default=0)
        overlap = len(set(train) & set(select))
        mismatches = sum(1 for rel in self._releases
                         if rel.inputs and recompute_variance(rel.mechanism, rel.inputs) != rel.variance)
        violations = []
        if max_train > 1:
            violations.append("training sample touched {} times".format(max_train))
        if self.selection_rounds is not None and max_select > self.selection_rounds:
            violations.append("held-out sample touched {} > T={} times".format(max_select, self.selection_rounds))
        if overlap:
            violations.append("{} samples used for both training and selection".format(overlap))
        if mismatches:
            violations.append("{} releases do not match their calibration formula".format(mismatches))
        return LedgerAudit(max_train, max_select, self.selection_rounds, overlap, mismatches, violations)

    def close(self) -> LedgerAudit:
        self.closed = True
        return self.audit()

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["step", "mechanism", "client", "sensitivity", "variance", "epsilon", "delta"])
            for rel in self._releases:
                writer.writerow([rel.step, rel.mechanism.value, "" if rel.client is None else rel.client,
                                 "" if rel.sensitivity is None else repr(rel.sensitivity),
                                 repr(rel.variance), repr(rel.epsilon), repr(rel.delta)])