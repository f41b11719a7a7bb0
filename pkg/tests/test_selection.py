import math

import pytest
import torch

from modules.core import InvalidArgument, LossBounds, SeededRng
from modules.objectives import DoubleWell
from modules.oracles import ClientPool
from modules.privacy import Mechanism, Phase, PrivacyBudget, PrivacyLedger, selection_noise_variances
from modules.selection import (CandidateSet, PairedResult, build_thresholds, noised_smallest_eig,
                               passes_thresholds, private_select, selection_degradation_report,
                               symmetric_gaussian)
from modules.verify import SospReport

UNIT = LossBounds(G=1.0, M=1.0, rho=1.0, U=1.0)


def test_thresholds_regression_values():
    thr = build_thresholds(0.1, UNIT, m=4, n=2500, T=100, d=10, privacy=PrivacyBudget(1.0, 1e-5),
                           omega_prime=0.05)
    assert thr.grad_threshold == pytest.approx(0.2253180, rel=1e-5)
    assert thr.eig_threshold == pytest.approx(-0.5158895, rel=1e-5)


def test_thresholds_drop_privacy_terms_without_budget():
    thr = build_thresholds(0.1, UNIT, m=4, n=2500, T=100, d=10, privacy=None, omega_prime=0.05)
    log_term = math.log(1600.0)
    assert math.isclose(thr.grad_threshold, 0.1 + log_term / 100.0, rel_tol=1e-12)
    assert math.isclose(thr.eig_threshold, -(math.sqrt(0.1) + math.sqrt(log_term / 1e4)), rel_tol=1e-12)


def test_hessian_privacy_term_linear_in_dimension():
    privacy = PrivacyBudget(2.0, 1e-5)

    def privacy_term(d):
        private = build_thresholds(0.1, UNIT, 2, 5000, 20, d, privacy, 0.05)
        public = build_thresholds(0.1, UNIT, 2, 5000, 20, d, None, 0.05)
        return public.eig_threshold - private.eig_threshold

    assert math.isclose(privacy_term(40), 2.0 * privacy_term(20), rel_tol=1e-9)


def test_thresholds_precondition():
    with pytest.raises(InvalidArgument):
        build_thresholds(0.1, UNIT, m=1, n=1, T=1, d=10, privacy=None, omega_prime=0.05)


def test_symmetric_gaussian():
    d = 450
    e = symmetric_gaussian(d, 0.5, SeededRng(0))
    assert torch.equal(e, e.T)
    upper = e[torch.triu_indices(d, d)[0], torch.triu_indices(d, d)[1]]
    assert upper.numel() > 100000
    assert abs(float(upper.var()) / 0.25 - 1.0) < 0.03


def test_noised_smallest_eig_matches_dense():
    h = torch.diag(torch.tensor([2.0, -0.5, 1.0, 3.0], dtype=torch.float64))
    lam, solver = noised_smallest_eig(h)
    assert abs(lam + 0.5) < 1e-8
    assert solver in ("power", "dense")


def test_candidate_stride_keeps_last():
    its = [torch.full((2,), float(i), dtype=torch.float64) for i in range(10)]
    cands = CandidateSet.from_iterates(its, 4)
    assert [float(p[0]) for p in cands.points] == [0.0, 4.0, 8.0, 9.0]
    assert CandidateSet.from_iterates(its, 3).T == 4
    with pytest.raises(InvalidArgument):
        CandidateSet([])


def _holdout(obj, m, n, seed):
    return ClientPool.build(obj, m, n, SeededRng(seed), name="holdout")


def test_single_sosp_candidate_is_selected():
    obj = DoubleWell(5)
    pool = _holdout(obj, 2, 1000, 0)
    ledger = PrivacyLedger()
    result = private_select(CandidateSet([obj.minima[0]]), pool, obj.bounds, alpha=0.5,
                            privacy=PrivacyBudget(1e6, 1e-5), omega_prime=0.05, rng=SeededRng(1), ledger=ledger)
    assert result.index == 0
    assert torch.equal(result.selected, obj.minima[0])
    assert ledger.audit().passed
    assert ledger.touch_count(0, Phase.SELECT) == 1


def test_saddle_is_skipped_for_the_minimum():
    obj = DoubleWell(5)
    cands = CandidateSet([obj.saddle_points[0], obj.minima[0]])
    privacy = PrivacyBudget(2.0, 1e-5)
    picked = 0
    for rep in range(50):
        result = private_select(cands, _holdout(obj, 2, 20000, rep), obj.bounds, alpha=0.01, privacy=privacy,
                                omega_prime=0.05, rng=SeededRng(rep, 1))
        picked += int(result.index == 1)
    assert picked >= math.ceil((1 - 0.05) * 50)


def test_releases_use_the_selection_calibration():
    obj = DoubleWell(5)
    privacy = PrivacyBudget(2.0, 1e-5)
    pool = _holdout(obj, 2, 500, 3)
    ledger = PrivacyLedger()
    cands = CandidateSet([obj.saddle_points[0], obj.minima[0]])
    result = private_select(cands, pool, obj.bounds, 0.01, privacy, 0.05, SeededRng(3), ledger=ledger)
    grad, hess = selection_noise_variances(obj.bounds.G, obj.bounds.M, 500, 2, privacy, 5)
    by_mech = {rel.mechanism: rel.variance for rel in ledger.releases}
    assert by_mech[Mechanism.SELECT_GRAD] == grad.variance
    assert by_mech[Mechanism.SELECT_HESS] == hess.variance
    audit = ledger.close()
    assert audit.passed and audit.max_select_touch == len(result.rows) and audit.select_limit == 2
    for row in result.rows:
        assert passes_thresholds(row.noised_grad_norm, row.noised_lambda_min, result.thresholds) == row.passed


def test_degradation_report():
    def rep(g, lam, ok):
        return SospReport(g, lam, None, ok)

    runs = [PairedResult(5, 0, rep(0.1, 1.0, True), rep(0.1, 1.0, True)),
            PairedResult(5, 1, rep(0.3, -1.0, False), None),
            PairedResult(20, 0, rep(0.1, 1.0, True), rep(0.5, -1.0, False)),
            PairedResult(20, 1, rep(0.2, 1.0, True), rep(0.4, -1.0, False))]
    rows = selection_degradation_report(runs)
    assert [r.d for r in rows] == [5, 20]
    assert rows[0].selection_no_pick_fraction == 0.5
    assert rows[0].selection_failure_fraction == 0.5
    assert rows[1].selection_non_sosp_fraction == 1.0
    assert rows[1].direct_pass_fraction == 1.0
    assert rows[1].selection_median_grad_norm == pytest.approx(0.45)
