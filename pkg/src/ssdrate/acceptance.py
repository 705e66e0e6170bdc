"""Acceptance checks, one function per criterion.

Each check returns a :class:`CriterionResult`; nothing here asserts, so
callers decide how to report. ``run_all`` is used by ``ssdrate selftest``
and by the test suite.
"""
from __future__ import annotations

import functools
import hashlib
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import d2d, oracle, ratelab
from .config import ExperimentConfig
from .d2d import D2DParams, ScoreMean
from .experiments import (Reference, build_reference, canonical_json, compare_seed, compare_summary,
                          ct_samples, make_problem, parallel_map, solve_run)
from .solver import epoch_start, running_average


@dataclass(frozen=True)
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float
    limit_seconds: float | None = None

    @property
    def within_time(self) -> bool:
        return self.limit_seconds is None or self.seconds <= self.limit_seconds

    def line(self) -> str:
        status = "PASS" if self.passed and self.within_time else "FAIL"
        limit = f" / limit {self.limit_seconds:.0f}s" if self.limit_seconds else ""
        return f"criterion {self.number:2d} [{status}] {self.title}: {self.detail} ({self.seconds:.1f}s{limit})"


@dataclass(frozen=True)
class Context:
    cfg: ExperimentConfig
    ref: Reference
    workers: int = 1


@functools.lru_cache(maxsize=2)
def default_context(workers: int = 1) -> Context:
    cfg = ExperimentConfig(problem=D2DParams(), lambda_max=50.0)
    payload = build_reference(cfg)
    return Context(cfg, Reference(payload, hashlib.sha256(canonical_json(payload).encode()).hexdigest()),
                   workers)


def _timed(number: int, title: str, limit: float | None):
    def wrap(fn: Callable[..., tuple[bool, str]]):
        @functools.wraps(fn)
        def inner(ctx: Context | None = None) -> CriterionResult:
            ctx = ctx or default_context()
            t0 = time.perf_counter()
            ok, detail = fn(ctx)
            return CriterionResult(number, title, bool(ok), detail, time.perf_counter() - t0, limit)
        inner.number = number
        return inner
    return wrap


def _draw_lambda(rng, size=None):
    """Log-uniform duals over [1e-3, 1e2]."""
    return 10.0 ** rng.uniform(-3, 2, size=size)


@_timed(1, "closed-form slot solution vs exhaustive grid", 120)
def criterion_1(ctx: Context):
    params = ctx.cfg.problem
    rng = np.random.default_rng(101)
    states = d2d.sample_states(params, rng, 1000)
    lams = _draw_lambda(rng, 1000)
    worst_excess, worst_slack, bad = -math.inf, 0.0, 0
    for lam, st in zip(lams, states):
        closed = d2d.slot_objective(float(lam), st, params)
        grid = oracle.grid_primal_argmax(float(lam), st, params, resolution=100_000)
        worst_slack = max(worst_slack, grid.slack)
        excess = grid.objective - closed  # > 0 would mean the grid beat the closed form
        worst_excess = max(worst_excess, excess)
        if closed < grid.objective - grid.slack or excess > 1e-9 * max(1.0, abs(closed)):
            bad += 1
    ok = bad == 0 and worst_slack <= 1e-3
    return ok, (f"{1000 - bad}/1000 draws within slack; max slack {worst_slack:.2e}, "
                f"max grid-minus-closed {worst_excess:.2e}")


@_timed(2, "winner rule equals direct argmax of per-user objectives", 60)
def criterion_2(ctx: Context):
    params = ctx.cfg.problem
    rng = np.random.default_rng(202)
    states = d2d.sample_states(params, rng, 10_000)
    lam_grid = np.logspace(-2, 2, 20)
    checked = ties = mismatches = 0
    for st in states:
        chosen = d2d.select_user(st, params)
        for lam in lam_grid:
            vals = oracle.direct_user_objectives(float(lam), st, params)
            ranked = sorted(vals.items(), key=lambda kv: (-kv[1], kv[0]))
            gap = ranked[0][1] - ranked[1][1] if len(ranked) > 1 else math.inf
            if gap <= 2 * oracle.grid_slack(float(lam), st, params, 100_000):
                ties += 1
                continue
            checked += 1
            mismatches += ranked[0][0] != chosen
    return mismatches == 0, f"{checked} checked, {mismatches} mismatches, {ties} near-ties skipped"


@_timed(3, "subgradient error does not depend on the dual", None)
def criterion_3(ctx: Context):
    params = ctx.cfg.problem
    mean = ScoreMean(ctx.ref.law("continuous")["score_mean"], 0.0, "quadrature")
    rng = np.random.default_rng(303)
    states = d2d.sample_states(params, rng, 1000)
    lams = (0.01, 0.1, 1.0, 10.0, 100.0)
    dev_fn = dev_diff = 0.0
    for st in states:
        direct = [d2d.subgradient_error(l, st, params, mean) for l in lams]
        # also as f_t - fbar, where the lambda terms cancel only numerically
        diff = [d2d.slot_subgradient(l, st, params).value[0] - d2d.mean_subgradient(l, params, mean)
                for l in lams]
        dev_fn = max(dev_fn, max(direct) - min(direct))
        dev_diff = max(dev_diff, max(diff) - min(diff))
    ok = dev_fn <= 1e-12 and dev_diff <= 1e-12
    return ok, f"max spread {dev_fn:.1e} (direct), {dev_diff:.1e} (f - fbar)"


_SURROGATE_CACHE: dict[int, list] = {}


def _surrogate_reports(ctx: Context):
    if id(ctx) in _SURROGATE_CACHE:
        return _SURROGATE_CACHE[id(ctx)]
    cfg = ctx.cfg.replace(state_law="surrogate")
    sur = ctx.ref.law("surrogate")
    tasks = [(cfg, ctx.ref, eps, cfg.base_seed + r, sur["lambda_star"], sur["D"])
             for eps in (0.1, 0.01) for r in range(20)]
    out = _SURROGATE_CACHE[id(ctx)] = parallel_map(_surrogate_task, tasks, ctx.workers)
    return out


def _surrogate_task(cfg, ref, eps, seed, lam_star, D):
    ns = (1, 10, 100)
    trace = solve_run(cfg, ref, eps, epoch_start(max(ns), eps), seed)
    return ratelab.epoch_reports(trace, make_problem(cfg, ref), eps, [lam_star], D, ns)


@_timed(4, "dual averaged-gap bound on the surrogate", 600)
def criterion_4(ctx: Context):
    reports = [r for rep in _surrogate_reports(ctx) for r in rep]
    slack = [r.bound1 - r.avg_dual for r in reports]
    ok = min(slack) >= -1e-9
    fail = sum(s < -1e-9 for s in slack)
    return ok, f"{len(reports) - fail}/{len(reports)} (eps, n, replication) cells hold; min margin {min(slack):.3e}"


@_timed(5, "primal averaged-gap bound on the surrogate", 600)
def criterion_5(ctx: Context):
    reports = [r for rep in _surrogate_reports(ctx) for r in rep]
    slack = [r.primal_at_avg - r.bound2 for r in reports]
    fail = sum(s < -1e-6 for s in slack)
    return fail == 0, f"{len(reports) - fail}/{len(reports)} cells hold; min margin {min(slack):.3e}"


def _non_increasing(vals) -> bool:
    return all(b <= a for a, b in zip(vals, vals[1:]))


@_timed(6, "C_t decays in the epoch count at fixed step", 900)
def criterion_6(ctx: Context):
    ns = (1, 10, 100, 1000)
    cells = ct_samples(ctx.cfg, ctx.ref, [0.1], ns, 50, ctx.workers)
    fit = ratelab.decay_fit([(n, cells[(0.1, n)]) for n in ns])
    med = fit.medians
    ok = _non_increasing(med) and fit.slope <= -0.3
    return ok, (f"medians {', '.join(f'{m:.2e}' for m in med)}; slope {fit.slope:.3f} "
                f"[{fit.ci_low:.3f}, {fit.ci_high:.3f}]")


@_timed(7, "C_t decays with the step size at fixed epoch count", 900)
def criterion_7(ctx: Context):
    eps_list = (0.1, 0.01, 0.001)
    cells = ct_samples(ctx.cfg, ctx.ref, eps_list, (10,), 50, ctx.workers)
    fit = ratelab.decay_fit([(e, cells[(e, 10)]) for e in eps_list])
    med = fit.medians
    ok = _non_increasing(med) and 0.3 <= fit.slope <= 0.5
    return ok, (f"medians {', '.join(f'{m:.2e}' for m in med)}; slope {fit.slope:.3f} "
                f"[{fit.ci_low:.3f}, {fit.ci_high:.3f}] (required 0.3 to 0.5)")


def _gap_task(cfg, ref, eps, seed, T, D):
    problem = make_problem(cfg, ref)
    trace = solve_run(cfg, ref, eps, T, seed)
    gap = np.abs(running_average(ratelab.dual_series(problem, trace.dual)) - D)
    terminal = float(gap[-1])
    hit = int(np.argmax(gap <= 2 * terminal)) + 1
    return terminal, hit


@_timed(8, "small step: closer terminal gap, slower approach", None)
def criterion_8(ctx: Context):
    T, D = 100_000, ctx.ref.D("continuous")
    tasks = [(ctx.cfg, ctx.ref, eps, ctx.cfg.base_seed + r, T, D) for r in range(20) for eps in (0.001, 0.1)]
    res = parallel_map(_gap_task, tasks, ctx.workers)
    small, large = res[0::2], res[1::2]
    closer = sum(s[0] < l[0] for s, l in zip(small, large))
    slower = sum(s[1] > l[1] for s, l in zip(small, large))
    return closer >= 18 and slower >= 18, (
        f"terminal gap smaller in {closer}/20 (median {np.median([s[0] for s in small]):.2e} vs "
        f"{np.median([l[0] for l in large]):.2e}); slower approach in {slower}/20 "
        f"(median t {np.median([s[1] for s in small]):.0f} vs {np.median([l[1] for l in large]):.0f})")


@_timed(9, "policy comparison ordering under matched power", None)
def criterion_9(ctx: Context):
    tasks = [(ctx.cfg, ctx.ref, ctx.cfg.base_seed + s) for s in range(10)]
    rows = [r for block in parallel_map(compare_seed, tasks, ctx.workers) for r in block]
    summ = compare_summary(rows)
    ordered = round(summ["ordering_fraction"] * 10)
    costly = round(summ["random_costlier_fraction"] * 10)
    mean_u = {p: np.mean([r["utility_minus_penalty"] for r in rows if r["policy"] == p])
              for p in ("proposed", "opportunistic", "random")}
    unmatched = sum(not r["power_matched"] for r in rows)
    return ordered >= 9 and costly == 10, (
        f"ordering on {ordered}/10 seeds, random costlier on {costly}/10; mean utility-minus-penalty "
        + ", ".join(f"{k} {v:.3f}" for k, v in mean_u.items())
        + f"; {unmatched} baseline runs could not be power-matched")


def _feasibility_task(cfg, ref, seed):
    trace = solve_run(cfg, ref, 0.01, 100_000, seed)
    avg = running_average(trace.subgradient[:, 0])
    return max(-avg[999], 0.0), max(-avg[-1], 0.0)


@_timed(10, "constraint violation of the running average shrinks", None)
def criterion_10(ctx: Context):
    tasks = [(ctx.cfg, ctx.ref, ctx.cfg.base_seed + r) for r in range(20)]
    res = parallel_map(_feasibility_task, tasks, ctx.workers)
    better = sum(late < early for early, late in res)
    return better >= 18, (f"{better}/20 replications; median negative part "
                          f"{np.median([e for e, _ in res]):.2e} at t=1e3, "
                          f"{np.median([l for _, l in res]):.2e} at t=1e5")


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10)


def run_all(ctx: Context | None = None, only=None, echo: Callable[[str], None] | None = None):
    results = []
    for crit in CRITERIA:
        if only and crit.number not in only:
            continue
        res = crit(ctx)
        if echo:
            echo(res.line())
        results.append(res)
    return results
