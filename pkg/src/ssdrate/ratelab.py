"""Convergence-rate instrumentation for dual subgradient traces.

Given a trace and exact (or estimated) expectations, this module evaluates
the dual and primal optimality-gap bounds, their stochastic terms C_t and
C'_t, and fits empirical decay exponents across replications.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from statsmodels.stats.proportion import proportion_confint

from .solver import (ConfigurationError, InvalidInputError, StochasticProblem, Trace,
                     epoch_index, epoch_start)

REPORT_COLUMNS = ("n", "epsilon", "t", "C_t", "C_t_prime", "avg_dual", "min_dual",
                  "avg_primal", "bound1", "bound2")

MeanFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DualEstimate:
    value: float
    stderr: float  # 0 for exact evaluation


def dual_value(lam, problem: StochasticProblem, samples: int | None = None,
               seed: int = 0) -> DualEstimate:
    """g(lambda), exactly when the problem can, otherwise by Monte Carlo.

    The Monte Carlo estimate averages the maximized slot Lagrangian over
    ``samples`` sampled states.
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if samples is None:
        exact = problem.dual_value(lam)
        if exact is not None:
            return DualEstimate(float(exact), 0.0)
        raise ConfigurationError("problem has no exact dual function; pass a sample count")
    if samples < 2:
        raise InvalidInputError("Monte Carlo needs at least two samples")
    rng = np.random.default_rng(seed)
    vals = np.array([problem.solve(lam, s).lagrangian for s in problem.sample_states(rng, samples)])
    return DualEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples)))


def dual_series(problem: StochasticProblem, duals: np.ndarray) -> np.ndarray:
    """Exact g along a (T, K) array of iterates."""
    duals = np.asarray(duals, dtype=float)
    try:
        vals = problem.dual_value(duals)
    except (ValueError, TypeError, IndexError):
        vals = None
    if vals is not None and np.shape(vals) == (duals.shape[0],):
        return np.asarray(vals, dtype=float)
    out = [problem.dual_value(row) for row in duals]
    if any(v is None for v in out):
        raise ConfigurationError("problem has no exact dual function")
    return np.asarray(out, dtype=float)


def subgradient_errors(trace: Trace, mean_fn: MeanFn | None = None, t: int | None = None) -> np.ndarray:
    """f_tau - fbar(lambda_tau) for tau < t, shape (t, K)."""
    t = len(trace) if t is None else t
    f = np.asarray(trace.subgradient[:t])
    if trace.mean_subgradient is not None:
        return f - np.asarray(trace.mean_subgradient[:t])
    if mean_fn is None:
        raise ConfigurationError("trace carries no expected subgradients and no evaluator was given")
    means = np.array([np.asarray(mean_fn(row), dtype=float).reshape(-1) for row in trace.dual[:t]])
    return f - means


def _check_t(trace: Trace, t: int | None) -> int:
    t = len(trace) if t is None else int(t)
    if not 1 <= t <= len(trace):
        raise InvalidInputError(f"t must lie in [1, {len(trace)}], got {t}")
    return t


def compute_Ct(trace: Trace, lambda_star, mean_fn: MeanFn | None = None, t: int | None = None) -> float:
    t = _check_t(trace, t)
    e = subgradient_errors(trace, mean_fn, t)
    centred = np.asarray(trace.dual[:t]) - np.asarray(lambda_star, dtype=float).reshape(1, -1)
    return abs(float(np.einsum("ij,ij->", e, centred)) / t)


def compute_Ct_prime(trace: Trace, mean_fn: MeanFn | None = None, t: int | None = None) -> float:
    t = _check_t(trace, t)
    e = subgradient_errors(trace, mean_fn, t)
    return abs(float(np.einsum("ij,ij->", e, np.asarray(trace.dual[:t]))) / t)


def cumulative_Ct(trace: Trace, lambda_star, mean_fn: MeanFn | None = None) -> np.ndarray:
    """C_t for every t = 1..T in one pass."""
    e = subgradient_errors(trace, mean_fn)
    centred = np.asarray(trace.dual) - np.asarray(lambda_star, dtype=float).reshape(1, -1)
    s = np.cumsum(np.einsum("ij,ij->i", e, centred))
    return np.abs(s) / np.arange(1, len(s) + 1)


def theorem1_gap(D: float, B0: float, n: int, epsilon: float, G: float, Ct: float) -> float:
    """Upper bound on the time-averaged dual value after n epochs."""
    if n < 1:
        raise InvalidInputError("the dual bound is undefined before the first complete epoch (n = 0)")
    return D + B0 / (2 * n) + epsilon * G * G / 2 + Ct


def theorem2_gap(P: float, R0: float, n: int, epsilon: float, G: float, Ct_prime: float) -> float:
    """Lower bound on the primal objective at the averaged allocation."""
    if n < 1:
        raise InvalidInputError("the primal bound is undefined before the first complete epoch (n = 0)")
    return P - R0 / (2 * n) - epsilon * G * G / 2 - Ct_prime


@dataclass(frozen=True)
class Lemma1Averages:
    L1: float
    L2_proxy: float | None


def lemma1_averages(errors, index_set: Iterable[int], T: int, errors_prime=None,
                    lam=None, lam_prime=None) -> Lemma1Averages:
    """Normalized error sums over an index set.

    ``errors`` are e_t(lam) (shape (N, K) or (N,)); ``errors_prime`` the same
    draws evaluated at lam_prime, needed only for the Lipschitz-type ratio.
    """
    e = np.asarray(errors, dtype=float)
    e = e.reshape(e.shape[0], -1)
    idx = np.fromiter(index_set, dtype=int)
    if T < idx.size:
        raise InvalidInputError("T must be at least the size of the index set")
    L1 = float(np.linalg.norm(e[idx].sum(axis=0)) / T)
    if errors_prime is None:
        return Lemma1Averages(L1, None)
    dist = float(np.linalg.norm(np.asarray(lam, dtype=float) - np.asarray(lam_prime, dtype=float)))
    if dist == 0.0:
        raise InvalidInputError("the ratio needs two distinct dual points")
    ep = np.asarray(errors_prime, dtype=float).reshape(e.shape)
    L2 = float(np.linalg.norm((e[idx] - ep[idx]).sum(axis=0)) / T) / dist
    return Lemma1Averages(L1, L2)


@dataclass(frozen=True)
class EpochReport:
    n: int
    epsilon: float
    t: int
    C_t: float
    C_t_prime: float
    avg_dual: float
    min_dual: float
    avg_primal: float
    primal_at_avg: float
    B0_over_2n: float
    R0_over_2n: float
    eps_G2_over_2: float
    bound1: float
    bound2: float

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}


def epoch_reports(trace: Trace, problem: StochasticProblem, epsilon: float, lambda_star, D: float,
                  ns: Sequence[int], P: float | None = None, G: float | None = None,
                  mean_fn: MeanFn | None = None) -> list[EpochReport]:
    """Reports at the epoch boundaries t = n / epsilon for each n.

    Cumulative sums are built once, so many n cost one pass over the trace.
    The primal reference P defaults to D.
    """
    P = D if P is None else P
    G = problem.subgradient_bound if G is None else G
    ts = [epoch_start(int(n), epsilon) for n in ns]
    T = max(ts)
    if T > len(trace) or min(ts) < 1:
        raise InvalidInputError(f"epoch boundaries {ts} fall outside the trace (length {len(trace)})")
    lam = np.asarray(trace.dual[:T])
    lam_star = np.asarray(lambda_star, dtype=float).reshape(1, -1)
    e = subgradient_errors(trace, mean_fn, T)
    g = dual_series(problem, lam)
    alloc = np.asarray(trace.allocation[:T])
    f0 = np.asarray(problem.objective(alloc), dtype=float).reshape(-1)
    if f0.size != T:
        f0 = np.array([problem.objective(a) for a in alloc])
    cs_c = np.cumsum(np.einsum("ij,ij->i", e, lam - lam_star))
    cs_cp = np.cumsum(np.einsum("ij,ij->i", e, lam))
    cs_g, run_min = np.cumsum(g), np.minimum.accumulate(g)
    cs_f0, cs_x = np.cumsum(f0), np.cumsum(alloc, axis=0)
    lam0 = lam[0]
    B0 = float(np.sum((lam0 - lam_star[0]) ** 2))
    R0 = float(np.sum(lam0 ** 2))
    out = []
    for n, t in zip(ns, ts):
        Ct, Ctp = abs(cs_c[t - 1]) / t, abs(cs_cp[t - 1]) / t
        out.append(EpochReport(
            n=int(n), epsilon=float(epsilon), t=t, C_t=float(Ct), C_t_prime=float(Ctp),
            avg_dual=float(cs_g[t - 1] / t), min_dual=float(run_min[t - 1]),
            avg_primal=float(cs_f0[t - 1] / t),
            primal_at_avg=float(problem.objective(cs_x[t - 1] / t)),
            B0_over_2n=B0 / (2 * n), R0_over_2n=R0 / (2 * n), eps_G2_over_2=epsilon * G * G / 2,
            bound1=theorem1_gap(D, B0, n, epsilon, G, Ct),
            bound2=theorem2_gap(P, R0, n, epsilon, G, Ctp)))
    return out


def epoch_report(trace: Trace, problem: StochasticProblem, epsilon: float, lambda_star, D: float,
                 t: int | None = None, **kw) -> EpochReport:
    """Single report at slot count t (default: the whole trace)."""
    t = _check_t(trace, t)
    n = epoch_index(t, epsilon)
    if n < 1:
        raise InvalidInputError("need at least one complete epoch")
    # report at the last epoch boundary not beyond t
    return epoch_reports(trace, problem, epsilon, lambda_star, D, [n], **kw)[0]


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    scales: tuple[float, ...]
    medians: tuple[float, ...]
    zeros_excluded: int
    degenerate: bool = False


def _ls_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def decay_fit(series: Sequence[tuple[float, object]], bootstrap: int = 2000, level: float = 0.95,
              seed: int = 0) -> DecayFit:
    """Slope of log(median C) against log(scale).

    Each entry is ``(scale, values)`` where values is a scalar or one value
    per replication. Replications are assumed paired across scales (shared
    seeds), so the bootstrap resamples replication indices jointly.
    Non-positive values are dropped before taking medians.
    """
    if len(series) < 3:
        raise InvalidInputError("need at least three points to fit a decay exponent")
    scales = np.array([float(s) for s, _ in series])
    cols = [np.atleast_1d(np.asarray(v, dtype=float)) for _, v in series]
    zeros = int(sum(np.sum(c <= 0) for c in cols))
    pos = [c[c > 0] for c in cols]
    if any(p.size == 0 for p in pos):
        return DecayFit(math.nan, math.nan, math.nan, math.nan, tuple(scales),
                        tuple(float(np.median(c)) for c in cols), zeros, degenerate=True)
    med = np.array([np.median(p) for p in pos])
    lx = np.log(scales)
    slope, intercept = _ls_slope(lx, np.log(med))
    reps = {c.size for c in cols}
    if len(reps) != 1 or reps == {1} or bootstrap <= 0:
        return DecayFit(slope, intercept, slope, slope, tuple(scales), tuple(med), zeros)
    R = reps.pop()
    mat = np.stack(cols, axis=1)  # (R, cells)
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(bootstrap):
        sample = mat[rng.integers(R, size=R)]
        bm = []
        for j in range(sample.shape[1]):
            col = sample[:, j]
            col = col[col > 0]
            bm.append(np.median(col) if col.size else np.nan)
        bm = np.array(bm)
        if np.all(np.isfinite(bm)):
            boots.append(_ls_slope(lx, np.log(bm))[0])
    alpha = (1 - level) / 2
    lo, hi = np.quantile(boots, [alpha, 1 - alpha]) if boots else (slope, slope)
    return DecayFit(slope, intercept, float(lo), float(hi), tuple(scales), tuple(med), zeros)


@dataclass(frozen=True)
class TailFrequency:
    nu: float
    zeta: float
    threshold: float
    frequency: float
    ci_low: float
    ci_high: float
    count: int
    total: int


def tail_frequency(values, nu: float, zeta: float = 0.1) -> TailFrequency:
    """Fraction of replications with C strictly above nu**(zeta - 1/2)."""
    if not 0 < zeta < 0.5:
        raise InvalidInputError("zeta must lie in (0, 1/2)")
    vals = np.asarray(values, dtype=float).reshape(-1)
    if vals.size == 0:
        raise InvalidInputError("no replications given")
    thr = nu ** (zeta - 0.5)
    k = int(np.sum(vals > thr))
    lo, hi = proportion_confint(k, vals.size, method="wilson")
    return TailFrequency(nu, zeta, thr, k / vals.size, float(lo), float(hi), k, int(vals.size))


@dataclass
class RateReport:
    zeta: float
    series: list[tuple[float, float]]
    fit: DecayFit
    tails: list[TailFrequency] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.zeta < 0.5:
            raise InvalidInputError("zeta must lie in (0, 1/2)")

    def rows(self) -> list[dict]:
        return [{"scale": s, "median_C": c} for s, c in self.series]


def write_rows(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """RFC-4180 CSV text with a header row."""
    columns = list(columns or (rows[0].keys() if rows else REPORT_COLUMNS))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in columns})
    return buf.getvalue()
