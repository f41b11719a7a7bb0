import dataclasses
import itertools
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.multiprocessing as mp
from torch.utils.tensorboard import SummaryWriter
from tqdm import tqdm

from modules.core import (AccountingViolation, AssumptionWarning, NoiseProfile, PsgdParams, SeededRng,
                          derive_params, manual_params)
from modules.objectives import build_objective
from modules.oracles import (ClientPool, DistributedSpiderOracle, GaussianOracle, ScheduleParams, SpiderOracle,
                             audit_drift, derive_schedule, o1_frequency_ratio, sample_usage_ratio,
                             schedule_noise_profile)
from modules.privacy import PrivacyBudget, PrivacyLedger, resolve_constant
from modules.psgd import (CoupledTrialConfig, audit_trace, gamma_descent, gauss_psgd, max_curvature_direction,
                          run_coupled_escape_trial, step_budget)
from modules.selection import CandidateSet, PairedResult, private_select, selection_degradation_report
from modules.verify import SospCriterion, check_curvature_assumption, check_sosp
from scripts.env import AttrDict, GRID_KEYS
from scripts.utils import binomial_floor, count_inversions, loglog_slope, trial_dir, write_csv, write_json

EXIT_OK = 0
EXIT_AUDIT = 1
EXIT_CONFIG = 2
EXIT_ACCOUNTING = 3

RESULT_HEADER = ("seed", "grid_index", "n", "m", "d", "epsilon", "final_grad_norm", "final_lambda_min",
                 "passed_sosp", "total_steps", "o1_count", "samples_used", "truncated", "alpha", "audits_passed")

ESCAPE_PROBABILITY = 0.125
COUPLED_PROBABILITY = 0.25


@dataclass
class Plan:
    params: PsgdParams
    schedule: ScheduleParams
    noise: NoiseProfile
    first_pass_steps: int
    mu_residual: float


@dataclass
class TrialResult:
    seed: int
    grid_index: int
    point: Dict
    row: Optional[List] = None
    wall_time: float = 0.0
    audits_passed: bool = True
    accounting_passed: bool = True
    extra: Dict = field(default_factory=dict)


def privacy_of(h, epsilon):
    return PrivacyBudget(epsilon, h.delta) if h.private else None


def noise_constants(h, privacy):
    if privacy is None:
        return 1.0, 1.0
    return resolve_constant(h.c1, privacy), resolve_constant(h.c2, privacy)


def initial_noise(bounds, n, m, d, privacy, c1):
    """Noise of a full-batch oracle; the starting guess for the two-pass planner."""
    log_d = max(1.0, math.log(d))
    sigma = log_d * bounds.G / math.sqrt(m * n)
    r = 0.0
    if privacy is not None:
        r = math.sqrt(c1 * bounds.G ** 2 * privacy.log_inv_delta / (m * n ** 2 * privacy.epsilon ** 2))
    return NoiseProfile(sigma, r, d)


def plan_run(h, obj, n, m, privacy, c1, c2):
    """Derive (params, schedule) twice: the second pass uses the noise and horizon of the first."""
    bounds, d = obj.bounds, obj.dim
    params = derive_params(bounds, initial_noise(bounds, n, m, d, privacy, c1), h.s, h.C, h.omega, h.horizon_hint)
    schedule = derive_schedule(bounds, params, n, m, d, privacy)
    noise = schedule_noise_profile(bounds, schedule, d, m, privacy, c1, c2)
    horizon = max(1, math.ceil(step_budget(params, bounds)))
    params = derive_params(bounds, noise, h.s, h.C, h.omega, horizon)
    ov = h.overrides
    if h.preset is not None or any(ov[k] is not None for k in ("chi", "mu", "Gamma", "Q")):
        params = params.with_overrides(bounds, noise, chi=ov["chi"], mu=ov["mu"], Gamma=ov["Gamma"], Q=ov["Q"],
                                       preset=h.preset)
    schedule = derive_schedule(bounds, params, n, m, d, privacy, kappa_override=ov["kappa"],
                               b1_override=ov["b1"], b2_override=ov["b2"])
    return Plan(params, schedule, noise, horizon, params.mu_residual)


def starting_point(h, obj, rng):
    if isinstance(h.x0, list):
        x0 = torch.tensor(h.x0, dtype=torch.float64)
    elif h.x0 == "saddle" and obj.saddle_points:
        x0 = obj.saddle_points[0].clone()
    elif h.x0 == "minimum" and obj.minima:
        x0 = obj.minima[0].clone()
    else:
        x0 = torch.zeros(obj.dim, dtype=torch.float64)
    if h.x0_scale > 0:
        x0 = x0 + rng.normal(obj.dim, std=h.x0_scale)
    return x0


def _summary_writer(h, tdir, trace):
    if h.summary_interval <= 0:
        return
    sw = SummaryWriter(os.path.join(tdir, "logs"))
    for s in trace.steps[::h.summary_interval]:
        sw.add_scalar("grad_norm_est", s.grad_norm_est, s.step)
        if s.f_after is not None:
            sw.add_scalar("F_exact", s.f_after, s.step)
    sw.close()


def run_psgd_trial(h, grid_index, point, seed, keep_iterates=False):
    """One Gauss-PSGD run with its ledger, audits and per-trial artifacts."""
    start = time.time()
    n, m, d, epsilon = point["n"], point["m"], point["dim"], point["epsilon"]
    result = TrialResult(seed, grid_index, dict(point))
    tdir = trial_dir(h.out, h.mode, grid_index, seed)
    obj = build_objective(h.objective, d, **h.objective_options)
    bounds = obj.bounds
    privacy = privacy_of(h, epsilon)
    c1, c2 = noise_constants(h, privacy)
    rng = SeededRng(seed)
    plan = plan_run(h, obj, n, m, privacy, c1, c2)
    params, schedule = plan.params, plan.schedule
    ledger = PrivacyLedger()
    pool = ClientPool.build(obj, m, h.sample_budget_factor * n, rng.substream(1), h.heterogeneity)
    common = dict(privacy=privacy, c1=c1, c2=c2, clip=h.clip, ledger=ledger, track_error=True,
                  rewind_mode=h.drift_rewind_mode)
    if m > 1 or h.mode == "distributed":
        oracle = DistributedSpiderOracle(pool, schedule, **common)
    else:
        oracle = SpiderOracle(obj, schedule, pool.clients[0].budget, pool.clients[0].rng, **common)

    audit = dict(seed=seed, grid_index=grid_index, point=dict(point), params=dataclasses.asdict(params),
                 schedule=dataclasses.asdict(schedule), planned_noise=dict(sigma=plan.noise.sigma, r=plan.noise.r,
                                                                          psi=plan.noise.psi),
                 first_pass_steps=plan.first_pass_steps, mu_residual=plan.mu_residual)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AssumptionWarning)
        check_curvature_assumption(bounds, params.alpha)
        try:
            x0 = starting_point(h, obj, rng.substream(3))
            x_out, trace = gauss_psgd(x0, oracle, params, max_steps=h.max_steps, rng=rng.substream(2),
                                      diagnostics=True, store_iterates=keep_iterates)
        except AccountingViolation as e:
            audit["ledger"] = dict(passed=False, violations=[str(e)])
            write_json(os.path.join(tdir, "audit.json"), audit)
            result.accounting_passed = result.audits_passed = False
            result.wall_time = time.time() - start
            return result
    audit["warnings"] = [str(w.message) for w in caught if issubclass(w.category, AssumptionWarning)]

    report = check_sosp(obj, x_out, SospCriterion.from_alpha(params.alpha, bounds.rho))
    # selection keeps writing to this ledger afterwards
    ledger_audit = ledger.audit() if keep_iterates else ledger.close()
    drift = audit_drift(oracle.trace, schedule.kappa)
    trace_audit = audit_trace(trace, params, bounds)
    state = oracle.state
    audit.update(ledger=ledger_audit.as_dict(), drift=drift.as_dict(), trace=trace_audit.as_dict(),
                 sosp=report.as_dict(), truncated=trace.truncated, truncation_reason=trace.truncation_reason,
                 sample_usage_ratio=sample_usage_ratio(schedule, state.o1_count, state.o2_count, n),
                 o1_frequency_ratio=o1_frequency_ratio(state.o1_count, bounds.U, params.eta, schedule.kappa),
                 accepted_steps=trace.accepted_steps)
    write_json(os.path.join(tdir, "audit.json"), audit)
    if h.store_traces:
        trace.to_csv(os.path.join(tdir, "trace.csv"))
        trace.to_jsonl(os.path.join(tdir, "events.jsonl"))
        oracle.trace_to_csv(os.path.join(tdir, "oracle.csv"))
        ledger.to_csv(os.path.join(tdir, "ledger.csv"))
    _summary_writer(h, tdir, trace)

    result.accounting_passed = ledger_audit.passed
    result.audits_passed = ledger_audit.passed and drift.passed and trace_audit.passed
    result.row = [seed, grid_index, n, m, d, epsilon, report.grad_norm, report.lambda_min, report.passes,
                  trace.total_steps, state.o1_count, pool.consumed(), trace.truncated, params.alpha,
                  result.audits_passed]
    result.extra = dict(obj=obj, x_out=x_out, trace=trace, report=report, params=params, pool=pool, ledger=ledger,
                        privacy=privacy, rng=rng, c1=c1, c2=c2, tdir=tdir)
    result.wall_time = time.time() - start
    return result


def run_select_trial(h, grid_index, point, seed):
    """Paired arms on one run: the direct output and the privately selected iterate."""
    result = run_psgd_trial(h, grid_index, point, seed, keep_iterates=True)
    if result.row is None:
        return result
    ex = result.extra
    obj, params, pool = ex["obj"], ex["params"], ex["pool"]
    n_holdout = math.ceil(h.holdout_fraction * point["n"])
    held_out = ClientPool.build(obj, pool.m, n_holdout, ex["rng"].substream(20), id_offset=pool.id_span,
                                name="holdout", shifts=pool.shifts)
    cands = CandidateSet.from_iterates(ex["trace"].iterates, h.candidate_stride)
    try:
        sel = private_select(cands, held_out, obj.bounds, params.alpha, ex["privacy"], h.omega_prime,
                             ex["rng"].substream(21), holdout_size=n_holdout, ledger=ex["ledger"], c1=ex["c1"],
                             c2=ex["c2"], clip=h.clip)
    except AccountingViolation:
        result.accounting_passed = result.audits_passed = False
        return result
    sel.to_csv(os.path.join(ex["tdir"], "selection.csv"))
    audit = ex["ledger"].close()
    write_json(os.path.join(ex["tdir"], "selection_audit.json"), audit.as_dict())
    result.accounting_passed = result.accounting_passed and audit.passed
    result.audits_passed = result.audits_passed and audit.passed
    crit = SospCriterion.from_alpha(params.alpha, obj.bounds.rho)
    picked = check_sosp(obj, sel.selected, crit) if sel.selected is not None else None
    result.extra["paired"] = PairedResult(point["dim"], seed, ex["report"], picked)
    result.extra["selected_index"] = sel.index
    return result


def run_escape_trials(h, grid_index, point, seed):
    """Single-round escape frequency at the planted saddle, plus a control at a minimum."""
    start = time.time()
    e = h.escape
    obj = build_objective(h.objective, point["dim"], **h.objective_options)
    params = manual_params(e["eta"], e["Gamma"], e["R"], e["chi"])
    saddle = obj.saddle_points[0] if obj.saddle_points else torch.zeros(obj.dim, dtype=torch.float64)
    rng = SeededRng(seed, 3)

    def frequency(x_tilde, tag):
        hits = 0
        for i in range(e["trials"]):
            oracle = GaussianOracle(obj, e["r"], rng.substream(tag, i), sigma=e["sigma"])
            hits += int(gamma_descent(x_tilde, oracle, params).escaped)
        return hits

    escapes = frequency(saddle, 0)
    control = frequency(obj.minima[0], 1) if obj.minima else None
    trials = e["trials"]
    result = TrialResult(seed, grid_index, dict(point))
    result.extra = dict(trials=trials, escapes=escapes, fraction=escapes / trials, control_escapes=control,
                        control_fraction=None if control is None else control / trials)
    result.wall_time = time.time() - start
    return result


def run_coupled_trials(h, grid_index, point, seed):
    """Coupled-sequence escape fraction along v_min and along the top-curvature control direction."""
    start = time.time()
    e = h.escape
    obj = build_objective(h.objective, point["dim"], **h.objective_options)
    params = manual_params(e["eta"], e["Gamma"], e["R"], e["chi"])
    saddle = obj.saddle_points[0]
    base = CoupledTrialConfig.at_saddle(obj, saddle, SeededRng(seed, 4))
    top = max_curvature_direction(obj, saddle)
    noise = NoiseProfile(e["sigma"], e["r"], obj.dim)
    hits = control = 0
    for i in range(e["trials"]):
        cfg = dataclasses.replace(base, shared_seed=SeededRng(seed, (4, i)))
        hits += int(run_coupled_escape_trial(cfg, obj, noise, params).escaped)
        ctl = dataclasses.replace(base.with_direction(top), shared_seed=SeededRng(seed, (4, i)))
        control += int(run_coupled_escape_trial(ctl, obj, noise, params).escaped)
    trials = e["trials"]
    result = TrialResult(seed, grid_index, dict(point))
    result.extra = dict(trials=trials, escapes=hits, fraction=hits / trials, control_escapes=control,
                        control_fraction=control / trials)
    result.wall_time = time.time() - start
    return result


TRIALS = {
    "single": run_psgd_trial,
    "distributed": run_psgd_trial,
    "sweep": run_psgd_trial,
    "select-ablation": run_select_trial,
    "escape-test": run_escape_trials,
    "coupled-test": run_coupled_trials,
}


def grid_points(h):
    """Cross product of the configured grids; unspecified keys take the scalar config value."""
    base = dict(n=h.n, m=h.m, dim=h.dim, epsilon=h.epsilon)
    keys = [k for k in GRID_KEYS if k in h.grid]
    points = []
    for values in itertools.product(*[h.grid[k] for k in keys]):
        point = dict(base)
        point.update(zip(keys, values))
        points.append(point)
    return points, keys


def _run_task(task):
    h, grid_index, point, seed = task
    h = AttrDict(h)
    result = TRIALS[h.mode](h, grid_index, point, seed)
    paired = result.extra.get("paired")
    # drop objects that do not need to travel back to the parent process
    result.extra = {k: v for k, v in result.extra.items()
                    if isinstance(v, (int, float, str, type(None)))}
    if paired is not None:
        result.extra["paired"] = paired
    return result


def run_trials(h) -> List[TrialResult]:
    points, _ = grid_points(h)
    tasks = [(dict(h), gi, p, seed) for gi, p in enumerate(points) for seed in h.seeds]
    if h.workers > 1:
        ctx = mp.get_context("spawn")
        with ctx.Pool(h.workers) as pool:
            results = list(tqdm(pool.imap_unordered(_run_task, tasks), total=len(tasks), desc=h.mode))
    else:
        results = [_run_task(t) for t in tqdm(tasks, desc=h.mode)]
    return sorted(results, key=lambda r: (r.grid_index, r.seed))


def _median(values):
    return float(np.median(values)) if values else None


def summarize_runs(h, results, out):
    """results.csv, timings.csv and a per-grid-point summary; returns the sweep fit if any."""
    rows = [r.row for r in results if r.row is not None]
    write_csv(os.path.join(out, "results.csv"), RESULT_HEADER, rows)
    write_csv(os.path.join(out, "timings.csv"), ("grid_index", "seed", "wall_time"),
              [(r.grid_index, r.seed, r.wall_time) for r in results])
    points, keys = grid_points(h)
    summary = []
    for gi, point in enumerate(points):
        group = [r.row for r in results if r.grid_index == gi and r.row is not None]
        grads = [row[6] for row in group]
        summary.append([gi, point["n"], point["m"], point["dim"], point["epsilon"], len(group),
                        sum(1 for row in group if row[8]), _median(grads), sum(1 for row in group if row[12])])
    write_csv(os.path.join(out, "summary.csv"),
              ("grid_index", "n", "m", "d", "epsilon", "runs", "passed_sosp", "median_final_grad_norm",
               "truncated"), summary)
    fit = {}
    medians = [s[7] for s in summary]
    if keys == ["n"] and None not in medians:
        fit = dict(axis="n", slope=loglog_slope([p["n"] for p in points], medians),
                   strictly_decreasing=count_inversions(medians, increasing=False) == 0
                   and len(set(medians)) == len(medians), medians=medians)
    elif keys == ["m"] and None not in medians:
        fit = dict(axis="m", inversions=count_inversions(medians, increasing=False), medians=medians)
    if fit:
        write_json(os.path.join(out, "sweep_fit.json"), fit)
        print("sweep over {}: {}".format(fit["axis"], {k: v for k, v in fit.items() if k != "medians"}))
    return fit


def summarize_escape(h, results, out, probability):
    rows = [[r.seed, r.extra["trials"], r.extra["escapes"], r.extra["fraction"], r.extra["control_escapes"],
             r.extra["control_fraction"]] for r in results]
    write_csv(os.path.join(out, "escape.csv"),
              ("seed", "trials", "escapes", "fraction", "control_escapes", "control_fraction"), rows)
    trials = sum(r.extra["trials"] for r in results)
    escapes = sum(r.extra["escapes"] for r in results)
    floor = binomial_floor(probability, trials)
    fraction = escapes / trials
    write_csv(os.path.join(out, "summary.csv"),
              ("objective", "trials", "escapes", "fraction", "reference", "floor", "passed"),
              [[h.objective, trials, escapes, fraction, probability, floor, fraction >= floor]])
    write_csv(os.path.join(out, "timings.csv"), ("grid_index", "seed", "wall_time"),
              [(r.grid_index, r.seed, r.wall_time) for r in results])
    print("escape fraction {:.4f} over {} trials (reference {}, floor {:.4f})"
          .format(fraction, trials, probability, floor))
    return fraction >= floor


def summarize_selection(h, results, out):
    summarize_runs(h, results, out)
    paired = [r.extra["paired"] for r in results if "paired" in r.extra]
    report = selection_degradation_report(paired)
    write_csv(os.path.join(out, "degradation.csv"), report[0].HEADER if report else (),
              [row.as_row() for row in report])
    failures = [row.selection_failure_fraction for row in report]
    write_json(os.path.join(out, "degradation_fit.json"),
               dict(dims=[row.d for row in report], selection_failure_fraction=failures,
                    inversions=count_inversions(failures, increasing=True),
                    direct_pass_fraction=[row.direct_pass_fraction for row in report]))


def execute(h) -> int:
    """Run the configured mode into ``h.out``; returns the process exit status."""
    os.makedirs(h.out, exist_ok=True)
    mode = h.mode
    if mode in ("select-ablation",) and "dim" not in h.grid:
        h.grid = dict(h.grid, dim=[h.dim])
    results = run_trials(h)
    if mode in ("escape-test", "coupled-test"):
        passed = summarize_escape(h, results, h.out,
                                  ESCAPE_PROBABILITY if mode == "escape-test" else COUPLED_PROBABILITY)
        return EXIT_OK if passed else EXIT_AUDIT
    if mode == "select-ablation":
        summarize_selection(h, results, h.out)
    else:
        summarize_runs(h, results, h.out)
    missing = [r for r in results if not os.path.isfile(os.path.join(trial_dir(h.out, mode, r.grid_index, r.seed),
                                                                     "audit.json"))]
    if any(not r.accounting_passed for r in results):
        return EXIT_ACCOUNTING
    if missing or any(not r.audits_passed for r in results):
        return EXIT_AUDIT
    return EXIT_OK
