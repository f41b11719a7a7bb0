import csv
import json
import os

import pytest

import run
from modules.objectives import build_objective
from scripts.env import load_config
from scripts.experiments import (EXIT_AUDIT, EXIT_OK, execute, grid_points, noise_constants, plan_run, privacy_of,
                                 run_psgd_trial)
from scripts.utils import count_inversions, loglog_slope

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SMALL = dict(n=300, dim=3, seeds=[0, 1], sample_budget_factor=4)


def _config(tmp_path, **overrides):
    h = load_config(overrides=dict(SMALL, out=str(tmp_path / "out"), **overrides), environ={})
    return h


def _read(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_plan_run_ties_schedule_to_params(tmp_path):
    h = _config(tmp_path)
    obj = build_objective(h.objective, h.dim)
    privacy = privacy_of(h, h.epsilon)
    plan = plan_run(h, obj, h.n, h.m, privacy, *noise_constants(h, privacy))
    assert plan.params.alpha == 4.0 * plan.params.chi
    assert 1 <= plan.schedule.b1 <= h.n and 1 <= plan.schedule.b2 <= h.n
    assert plan.first_pass_steps >= 1


def test_preset_overrides_reach_the_plan(tmp_path):
    h = load_config(preset="paper-defaults", overrides=dict(SMALL, out=str(tmp_path)), environ={})
    obj = build_objective(h.objective, h.dim)
    privacy = privacy_of(h, h.epsilon)
    plan = plan_run(h, obj, h.n, h.m, privacy, *noise_constants(h, privacy))
    assert plan.params.chi == 0.01 and plan.params.alpha == 0.04
    assert plan.params.Gamma == 10 and plan.params.Q == 3
    assert plan.schedule.kappa == 0.1
    assert plan.params.preset == "paper-defaults"


def test_grid_points_cross_product(tmp_path):
    h = _config(tmp_path, mode="sweep", grid={"n": [100, 200], "m": [1, 2]})
    points, keys = grid_points(h)
    assert keys == ["n", "m"]
    assert [(p["n"], p["m"]) for p in points] == [(100, 1), (100, 2), (200, 1), (200, 2)]


def test_single_client_distributed_run_matches_single(tmp_path):
    point = dict(n=300, m=1, dim=3, epsilon=1.0)
    single = run_psgd_trial(_config(tmp_path, mode="single"), 0, point, 0)
    distributed = run_psgd_trial(_config(tmp_path, mode="distributed"), 0, point, 0)
    assert single.row[6:13] == distributed.row[6:13]
    assert single.audits_passed and distributed.audits_passed


def test_single_mode_end_to_end(tmp_path):
    h = _config(tmp_path)
    assert execute(h) == EXIT_OK
    rows = _read(os.path.join(h.out, "results.csv"))
    assert rows[0][:3] == ["seed", "grid_index", "n"]
    assert len(rows) == 3
    for seed in (0, 1):
        tdir = os.path.join(h.out, "trials", "single_g000_s{}".format(seed))
        with open(os.path.join(tdir, "audit.json")) as f:
            audit = json.load(f)
        assert audit["ledger"]["passed"] and audit["drift"]["passed"] and audit["trace"]["passed"]
        assert audit["params"]["alpha"] == 4.0 * audit["params"]["chi"]
        for name in ("trace.csv", "events.jsonl", "oracle.csv", "ledger.csv"):
            assert os.path.isfile(os.path.join(tdir, name))
    assert os.path.isfile(os.path.join(h.out, "timings.csv"))


def test_reruns_are_byte_identical(tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert run.main(["run", "--out", out, "--seeds", "3"] + ["--config", _small_file(tmp_path)]) == EXIT_OK
        with open(os.path.join(out, "results.csv"), "rb") as f:
            outputs.append(f.read())
    assert outputs[0] == outputs[1]


def _small_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(dict(n=300, dim=3, sample_budget_factor=4)))
    return str(path)


def test_escape_mode_writes_summary(tmp_path):
    h = _config(tmp_path, mode="escape-test", objective="quad-saddle", dim=10, seeds=[0],
                escape={"trials": 20})
    assert execute(h) == EXIT_OK
    summary = _read(os.path.join(h.out, "summary.csv"))
    assert summary[0] == ["objective", "trials", "escapes", "fraction", "reference", "floor", "passed"]
    assert summary[1][1] == "20"


def test_escape_mode_fails_below_the_floor(tmp_path):
    h = _config(tmp_path, mode="escape-test", objective="quad-saddle", dim=10, seeds=[0],
                escape={"Gamma": 1, "trials": 100})
    assert execute(h) == EXIT_AUDIT
    summary = _read(os.path.join(h.out, "summary.csv"))
    assert summary[1][2] == "0" and summary[1][6] == "False"


def test_coupled_mode_writes_summary(tmp_path):
    h = _config(tmp_path, mode="coupled-test", objective="quad-saddle", dim=10, seeds=[0],
                escape={"trials": 10, "sigma": 0.05})
    assert execute(h) == EXIT_OK
    rows = _read(os.path.join(h.out, "escape.csv"))
    assert len(rows) == 2


def test_select_ablation_small(tmp_path):
    h = _config(tmp_path, mode="select-ablation", seeds=[0], m=2, candidate_stride=5)
    assert execute(h) == EXIT_OK
    assert os.path.isfile(os.path.join(h.out, "degradation.csv"))
    with open(os.path.join(h.out, "degradation_fit.json")) as f:
        fit = json.load(f)
    assert fit["dims"] == [3]
    tdir = os.path.join(h.out, "trials", "select-ablation_g000_s0")
    with open(os.path.join(tdir, "selection_audit.json")) as f:
        assert json.load(f)["passed"]


def test_fit_helpers():
    assert loglog_slope([1, 10, 100], [1.0, 0.1, 0.01]) == pytest.approx(-1.0)
    assert count_inversions([3, 2, 2, 1], increasing=False) == 0
    assert count_inversions([3, 4, 2, 5], increasing=False) == 2


@pytest.mark.slow
def test_single_config_acceptance(tmp_path):
    out = str(tmp_path / "single")
    assert run.main(["run", "--config", os.path.join(ROOT, "configs", "single.json"), "--out", out]) == EXIT_OK
    rows = _read(os.path.join(out, "results.csv"))[1:]
    assert len(rows) == 20
    assert sum(int(r[8]) for r in rows) >= 18
    assert not any(int(r[12]) for r in rows)
    # the saddle has lambda_min = -1; a positive value means the run left it for a well
    assert sum(float(r[7]) > 0 for r in rows) >= 18
    assert all(int(r[9]) > 100 for r in rows)
    for seed in range(20):
        with open(os.path.join(out, "trials", "single_g000_s{}".format(seed), "audit.json")) as f:
            audit = json.load(f)
        assert audit["params"]["alpha"] < 0.1
        assert audit["o1_frequency_ratio"] <= 10.0
        assert audit["trace"]["step_budget_constant"] <= audit["trace"]["step_budget_guard"]
        if seed == 0:
            assert audit["trace"]["escape_successes"] >= 1


@pytest.mark.slow
def test_sweep_over_n_reports_a_fit(tmp_path):
    out = str(tmp_path / "sweep")
    config = os.path.join(ROOT, "configs", "sweep_n.json")
    assert run.main(["sweep", "--config", config, "--out", out, "--workers", "1"]) == EXIT_OK
    with open(os.path.join(out, "sweep_fit.json")) as f:
        fit = json.load(f)
    assert fit["axis"] == "n" and len(fit["medians"]) == 4
    assert fit["strictly_decreasing"]
    assert -0.55 <= fit["slope"] <= -0.10
    rows = _read(os.path.join(out, "results.csv"))[1:]
    assert not any(int(r[12]) for r in rows)


@pytest.mark.slow
def test_sweep_over_m_shows_collaboration(tmp_path):
    out = str(tmp_path / "sweep_m")
    config = os.path.join(ROOT, "configs", "sweep_m.json")
    assert run.main(["sweep", "--config", config, "--out", out, "--workers", "1"]) == EXIT_OK
    with open(os.path.join(out, "sweep_fit.json")) as f:
        fit = json.load(f)
    assert fit["axis"] == "m" and fit["inversions"] <= 1
    assert fit["medians"][-1] < fit["medians"][0]


@pytest.mark.slow
def test_selection_degrades_with_dimension(tmp_path):
    out = str(tmp_path / "ablation")
    config = os.path.join(ROOT, "configs", "select_ablation.json")
    seeds = ",".join(str(s) for s in range(10))
    assert run.main(["select-ablation", "--config", config, "--out", out, "--seeds", seeds]) == EXIT_OK
    with open(os.path.join(out, "degradation_fit.json")) as f:
        fit = json.load(f)
    assert fit["dims"] == [5, 20, 80, 320]
    failures = fit["selection_failure_fraction"]
    assert fit["inversions"] <= 1
    assert failures[0] <= 0.2 and failures[-1] >= 0.8
    assert min(fit["direct_pass_fraction"]) >= 0.8
