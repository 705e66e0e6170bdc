"""Brute-force ground truth for the D2D problem.

Everything here is computed by exhaustive evaluation: finite sums over
the atoms of a discrete state distribution, and grid search over the
primal variables. The closed forms in :mod:`ssdrate.d2d` are checked
against these, so the code below deliberately avoids the winner-selection
shortcut and evaluates each user's objective directly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import d2d
from .d2d import D2DParams, Fading, NetworkState, ScoreMean
from .solver import ConfigurationError, InvalidInputError, SolverConfig, DualVector, run

DIST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DiscreteDistribution:
    atoms: tuple[NetworkState, ...]
    probs: np.ndarray

    def __post_init__(self):
        atoms = tuple(self.atoms)
        probs = np.asarray(self.probs, dtype=float).reshape(-1)
        if len(atoms) == 0 or len(atoms) != probs.size:
            raise InvalidInputError("need one probability per atom")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"probabilities must be >= 0 and sum to 1 (sum={probs.sum()!r})")
        keys = {(a.active.tobytes(), a.costs.tobytes(), a.gains.tobytes()) for a in atoms}
        if len(keys) != len(atoms):
            raise InvalidInputError("atoms must be distinct")
        probs.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, atoms: Sequence[NetworkState]) -> "DiscreteDistribution":
        n = len(atoms)
        return cls(tuple(atoms), np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return len(self.atoms)

    def to_mapping(self) -> dict:
        return {"version": DIST_FORMAT_VERSION,
                "atoms": [dict(prob=float(p), **a.to_mapping()) for a, p in zip(self.atoms, self.probs)]}

    @classmethod
    def from_mapping(cls, data: dict) -> "DiscreteDistribution":
        if data.get("version") != DIST_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported distribution file version {data.get('version')!r}")
        atoms = [NetworkState.from_mapping(a) for a in data["atoms"]]
        probs = np.array([a["prob"] for a in data["atoms"]], dtype=float)
        return cls(tuple(atoms), probs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_mapping(), indent=1))

    @classmethod
    def load(cls, path) -> "DiscreteDistribution":
        return cls.from_mapping(json.loads(Path(path).read_text()))


def build_surrogate(params: D2DParams, num_atoms: int = 1000, seed: int = 0) -> DiscreteDistribution:
    """Stratified finite-support stand-in for the continuous state law.

    Each active-set size gets equal total mass. Within a size, gains are a
    Latin hypercube through the truncated-Rayleigh quantile function and
    active sets are uniform random subsets.
    """
    sizes = np.arange(params.active_min, params.active_max + 1)
    if num_atoms < sizes.size:
        raise ConfigurationError(f"need at least {sizes.size} atoms (one per active-set size)")
    rng = np.random.default_rng(seed)
    M = params.num_ues
    per_size = np.full(sizes.size, num_atoms // sizes.size)
    per_size[: num_atoms - per_size.sum()] += 1
    atoms, probs = [], []
    for s, n in zip(sizes, per_size):
        strata = np.stack([rng.permutation(n) for _ in range(M)], axis=1)
        u = (strata + rng.random((n, M))) / n
        gains = d2d.truncated_rayleigh_ppf(u, params)
        if params.unit_cost_mode == "index":
            costs = np.broadcast_to(np.arange(1, M + 1, dtype=float), (n, M))
        else:
            cu = (np.stack([rng.permutation(n) for _ in range(M)], axis=1) + rng.random((n, M))) / n
            costs = params.unit_cost_low + cu * (params.unit_cost_high - params.unit_cost_low)
        for k in range(n):
            ues = np.sort(rng.choice(M, size=int(s), replace=False))
            atoms.append(NetworkState(ues, costs[k, ues], gains[k, ues]))
            probs.append(1.0 / (sizes.size * n))
    probs = np.array(probs)
    return DiscreteDistribution(tuple(atoms), probs / probs.sum())


class _AtomTable:
    """Atoms padded into (N, M) arrays; inactive slots masked out."""

    def __init__(self, dist: DiscreteDistribution, params: D2DParams):
        N, M = len(dist), params.num_ues
        self.probs = np.asarray(dist.probs)
        self.mask = np.zeros((N, M), dtype=bool)
        self.costs = np.ones((N, M))
        self.gains = np.ones((N, M))
        for n, a in enumerate(dist.atoms):
            self.mask[n, a.active] = True
            self.costs[n, a.active] = a.costs
            self.gains[n, a.active] = a.gains
        self.psi = np.broadcast_to(params.psi_array if params.fading is Fading.FAST else np.zeros(M), (N, M))
        # selection rule written out independently of d2d.winner_scores
        if params.fading is Fading.SLOW:
            score = self.gains / self.costs
        else:
            base = math.e if params.log_base is d2d.LogBase.NATURAL else 2.0
            score = np.log(self.gains / self.costs) / math.log(base) + self.psi
        score = np.where(self.mask, score, -np.inf)
        self.winner = np.argmax(score, axis=1)

    def mean_offset(self, params: D2DParams) -> float:
        rows = np.arange(len(self.probs))
        g, c = self.gains[rows, self.winner], self.costs[rows, self.winner]
        a = params.bandwidth * (np.log(g / c) / params.kappa + self.psi[rows, self.winner])
        return float(np.dot(self.probs, a))


def _user_terms(lam: float, table: _AtomTable, params: D2DParams):
    """Per-user lam*R(p_hat) - c p_hat and R(p_hat) for every atom."""
    W, alpha = params.bandwidth, params.alpha
    p_hat = np.clip(W * lam / (table.costs * params.kappa), params.cost_min / table.costs,
                    params.cost_max / table.costs)
    rate = W * np.log(p_hat * table.gains / alpha) / params.kappa + W * table.psi
    obj = lam * rate - table.costs * p_hat
    return np.where(table.mask, obj, -np.inf), rate


def _rate_part(lam: float, params: D2DParams) -> tuple[float, float]:
    r = params.rate_max if lam <= 0 else min(max(1.0 / lam, params.rate_min), params.rate_max)
    return r, math.log(r) - lam * r


def exact_expected_subgradient(lam: float, dist: DiscreteDistribution, params: D2DParams,
                               table: _AtomTable | None = None) -> float:
    table = table or _AtomTable(dist, params)
    _, rate = _user_terms(float(lam), table, params)
    r, _ = _rate_part(float(lam), params)
    f = rate[np.arange(len(table.probs)), table.winner] - r
    return float(np.dot(table.probs, f))


def exact_dual_value(lam: float, dist: DiscreteDistribution, params: D2DParams,
                     table: _AtomTable | None = None) -> float:
    table = table or _AtomTable(dist, params)
    obj, _ = _user_terms(float(lam), table, params)
    _, rate_obj = _rate_part(float(lam), params)
    return float(rate_obj + np.dot(table.probs, obj.max(axis=1)))


@dataclass(frozen=True)
class DualReference:
    lambda_star: float
    D: float
    grid_points: int
    lambda_max: float


def minimize_on_grid(g: Callable[[float], float], lo: float, hi: float, resolution: int,
                     tol: float = 1e-8) -> tuple[float, float]:
    """Grid scan followed by golden-section refinement of the best cell."""
    grid = np.linspace(lo, hi, resolution)
    vals = np.array([g(x) for x in grid])
    if not np.all(np.isfinite(vals)):
        raise ConfigurationError("dual function is not finite on the grid")
    k = int(np.argmin(vals))
    if k == 0 or k == resolution - 1:
        return float(grid[k]), float(vals[k])
    a, b, c = grid[k - 1], grid[k], grid[k + 1]
    x = optimize.golden(g, brack=(a, b, c), tol=tol / max(abs(b), 1e-12))
    x = float(min(max(x, a), c))
    gx = g(x)
    if gx > vals[k]:
        return float(b), float(vals[k])
    return x, float(gx)


def grid_dual_minimize(dist: DiscreteDistribution, params: D2DParams, lambda_max: float,
                       resolution: int = 2001, tol: float = 1e-8) -> DualReference:
    table = _AtomTable(dist, params)
    lam, D = minimize_on_grid(lambda x: exact_dual_value(x, dist, params, table),
                              0.0, lambda_max, resolution, tol)
    return DualReference(lam, D, resolution, lambda_max)


def reference_from_score_mean(params: D2DParams, mean: ScoreMean, lambda_max: float,
                              resolution: int = 2001, tol: float = 1e-8) -> DualReference:
    """Same minimization for the continuous model, given E[winner offset]."""
    lam, D = minimize_on_grid(lambda x: d2d.dual_function(float(x), params, mean),
                              0.0, lambda_max, resolution, tol)
    return DualReference(lam, D, resolution, lambda_max)


@dataclass(frozen=True)
class GridArgmax:
    rate: float
    ue: int
    power: float
    objective: float
    slack: float
    per_user: dict[int, float]  # best grid objective for each active UE

    @property
    def top_two_gap(self) -> float:
        vals = sorted(self.per_user.values(), reverse=True)
        return math.inf if len(vals) < 2 else vals[0] - vals[1]


def grid_slack(lam: float, state: NetworkState, params: D2DParams, resolution: int) -> float:
    """Worst-case loss of the best grid point against the continuous maximum.

    The slot objective is concave in r and in each user's p, and the grids
    contain the box endpoints. A boundary maximizer is therefore hit exactly
    and an interior one lies within half a step of a grid point, where the
    first-order term vanishes: loss <= max|f''| (h/2)^2 / 2 per variable.
    """
    h_r = (params.rate_max - params.rate_min) / (resolution - 1)
    curv_r = 1.0 / params.rate_min ** 2
    worst_p = 0.0
    for c in state.costs:
        p_lo = params.cost_min / c
        h_p = (params.cost_max - params.cost_min) / (c * (resolution - 1))
        curv_p = lam * params.bandwidth / (params.kappa * p_lo ** 2)
        worst_p = max(worst_p, 0.5 * curv_p * (h_p / 2) ** 2)
    return 0.5 * curv_r * (h_r / 2) ** 2 + worst_p


def grid_primal_argmax(lam: float, state: NetworkState, params: D2DParams,
                       resolution: int = 100_000) -> GridArgmax:
    """Exhaustive grid maximization of the slot Lagrangian.

    U(r) - lam r + lam R_i(p, gamma_i) - c_i p over r, i and p. The
    objective separates into an r-part and an (i, p)-part, so the joint
    grid maximum is the sum of the two grid maxima.
    """
    if resolution < 1000:
        raise InvalidInputError("resolution must be at least 1000")
    W, alpha = params.bandwidth, params.alpha
    r = np.linspace(params.rate_min, params.rate_max, resolution)
    r_obj = np.log(r) - lam * r
    kr = int(np.argmax(r_obj))
    per_user = {}
    best = (-math.inf, -1, 0.0)
    u = np.linspace(0.0, 1.0, resolution)
    for ue, c, g in zip(state.active, state.costs, state.gains):
        p = params.cost_min / c + u * (params.cost_max - params.cost_min) / c
        rate = W * np.log(p * g / alpha) / params.kappa
        if params.fading is Fading.FAST:
            rate = rate + W * params.psi[int(ue)]
        obj = lam * rate - c * p
        kp = int(np.argmax(obj))
        per_user[int(ue)] = float(obj[kp])
        if obj[kp] > best[0]:
            best = (float(obj[kp]), int(ue), float(p[kp]))
    return GridArgmax(rate=float(r[kr]), ue=best[1], power=best[2],
                      objective=float(r_obj[kr]) + best[0],
                      slack=grid_slack(lam, state, params, resolution), per_user=per_user)


def direct_user_objectives(lam: float, state: NetworkState, params: D2DParams) -> dict[int, float]:
    """Per-user value of the slot power problem from its piecewise form.

    For lam <= kappa C_min / W the power sits at C_min/c, for lam >=
    kappa C_max / W at C_max/c, and in between at the stationary point
    W lam / (kappa c).
    """
    W, alpha, kappa = params.bandwidth, params.alpha, params.kappa
    out = {}
    for ue, c, g in zip(state.active, state.costs, state.gains):
        ratio = g / c
        if lam * W / kappa <= params.cost_min:
            val = lam * W * math.log(params.cost_min * ratio / alpha) / kappa - params.cost_min
        elif lam * W / kappa >= params.cost_max:
            val = lam * W * math.log(params.cost_max * ratio / alpha) / kappa - params.cost_max
        else:
            val = lam * W * math.log(lam * W * ratio / (kappa * alpha)) / kappa - lam * W / kappa
        if params.fading is Fading.FAST:
            val += lam * W * params.psi[int(ue)]
        out[int(ue)] = val
    return out


@dataclass(frozen=True)
class PrimalEstimate:
    D: float
    best_primal: float
    gap: float


def _policy_value(lams: np.ndarray, offset: float, params: D2DParams) -> float:
    """Exact value of time-sharing the slot policies at the given duals.

    The mixture delivers mean rate R_bar at mean cost q_bar, so rate
    min(r_bar, R_bar) is feasible and scores U(.) - q_bar. Returns -inf
    if even r_min cannot be delivered.
    """
    q = np.atleast_1d(d2d.transaction_cost(lams, params))
    delivered = float(np.mean(params.bandwidth * np.log(q / params.alpha) / params.kappa)) + offset
    r_bar = float(np.mean([_rate_part(float(x), params)[0] for x in np.atleast_1d(lams)]))
    r = min(r_bar, delivered)
    if r < params.rate_min:
        return -math.inf
    return math.log(r) - float(np.mean(q))


def primal_optimum_estimate(dist: DiscreteDistribution, params: D2DParams, reference: DualReference,
                            epsilons: Sequence[float] = (0.01, 0.001), horizon: int = 20_000,
                            seed: int = 0) -> PrimalEstimate:
    """D as the primal reference plus the best feasible value we can exhibit.

    Candidates are the stationary policy at lambda* and the time-shared
    policies of averaged runs, each scored exactly on the atoms.
    """
    table = _AtomTable(dist, params)
    offset = table.mean_offset(params)
    best = _policy_value(np.array([reference.lambda_star]), offset, params)
    problem = d2d.D2DProblem(params, distribution=dist)
    for k, eps in enumerate(epsilons):
        cfg = SolverConfig(eps, horizon, DualVector.zeros(1, reference.lambda_max), seed=seed + k)
        lam = run(problem, cfg).dual[:, 0]
        for frac in (1.0, 0.5):  # whole run and its second half
            best = max(best, _policy_value(lam[int(len(lam) * (1 - frac)):], offset, params))
    return PrimalEstimate(D=reference.D, best_primal=best, gap=reference.D - best)
