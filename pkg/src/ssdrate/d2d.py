"""D2D mobile-caching resource allocation solved by stochastic dual descent.

Every slot the downloading user sees a random set of caches, each
advertising a unit power cost c and an average channel gain gamma. It
powers exactly one of them, picks a target rate, and updates a scalar
multiplier on the average-rate constraint.

Rates use the high-SNR form R = W log(p gamma / alpha) (+ W psi_i under
fast fading). The utility is U(r) = ln r.

UE indices are 0-based; in ``index`` cost mode UE ``i`` charges ``i + 1``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import integrate

from .solver import (ConfigurationError, InvalidInputError, SlotSolution,
                     StochasticProblem, SubgradientSample)

LN2 = math.log(2.0)


class Fading(str, Enum):
    SLOW = "slow"
    FAST = "fast"


class LogBase(str, Enum):
    NATURAL = "natural"
    BASE2 = "base2"


@dataclass(frozen=True)
class D2DParams:
    num_ues: int = 25
    bandwidth: float = 1.0
    alpha: float = 1.0
    cost_min: float = 1.0   # C_min, per-transaction floor on c * p
    cost_max: float = 25.0  # C_max
    rate_min: float = 0.2
    rate_max: float = 10.0
    psi: tuple[float, ...] | None = None  # None -> all ones
    fading: Fading = Fading.FAST
    log_base: LogBase = LogBase.NATURAL
    gamma_min: float = 0.1
    gamma_max: float = 65.0
    rayleigh_scale: float = 20.0
    active_min: int = 5
    active_max: int = 25
    unit_cost_mode: str = "index"  # "index": c = i + 1, "uniform": U[low, high]
    unit_cost_low: float = 1.0
    unit_cost_high: float = 25.0
    max_rejections: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "fading", Fading(self.fading))
        object.__setattr__(self, "log_base", LogBase(self.log_base))
        if self.psi is None:
            object.__setattr__(self, "psi", (1.0,) * int(self.num_ues))
        else:
            object.__setattr__(self, "psi", tuple(float(v) for v in self.psi))
        M = self.num_ues
        problems = []
        if M < 1:
            problems.append("num_ues must be >= 1")
        if len(self.psi) != M:
            problems.append(f"psi has {len(self.psi)} entries, expected {M}")
        for name in ("bandwidth", "alpha", "cost_min", "rate_min", "gamma_min", "rayleigh_scale"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.cost_min > self.cost_max:
            problems.append("cost_min > cost_max")
        if self.rate_min > self.rate_max:
            problems.append("rate_min > rate_max")
        if self.gamma_min > self.gamma_max:
            problems.append("gamma_min > gamma_max")
        if not 1 <= self.active_min <= self.active_max <= M:
            problems.append("need 1 <= active_min <= active_max <= num_ues")
        if self.unit_cost_mode not in ("index", "uniform"):
            problems.append(f"unknown unit_cost_mode {self.unit_cost_mode!r}")
        elif self.unit_cost_mode == "uniform" and not 0 < self.unit_cost_low <= self.unit_cost_high:
            problems.append("need 0 < unit_cost_low <= unit_cost_high")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def kappa(self) -> float:
        """d/dp of log(p) is 1/(kappa p): 1 for natural log, ln 2 for log2."""
        return 1.0 if self.log_base is LogBase.NATURAL else LN2

    def log(self, x):
        return np.log(x) if self.log_base is LogBase.NATURAL else np.log2(x)

    @property
    def psi_array(self) -> np.ndarray:
        return np.asarray(self.psi, dtype=float)

    @property
    def psi_max(self) -> float:
        return float(max(self.psi))

    @property
    def unit_cost_support(self) -> tuple[float, float]:
        if self.unit_cost_mode == "index":
            return 1.0, float(self.num_ues)
        return float(self.unit_cost_low), float(self.unit_cost_high)

    def replace(self, **changes) -> "D2DParams":
        return dataclasses.replace(self, **changes)

    def to_mapping(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["fading"] = self.fading.value
        out["log_base"] = self.log_base.value
        out["psi"] = list(self.psi)
        return out

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "D2DParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown D2D parameter(s): {sorted(unknown)}")
        kwargs = dict(data)
        if kwargs.get("psi") is not None and not isinstance(kwargs["psi"], (list, tuple)):
            kwargs["psi"] = (float(kwargs["psi"]),) * int(kwargs.get("num_ues", cls.num_ues))
        return cls(**kwargs)


@dataclass(frozen=True)
class NetworkState:
    """One realization of (active set, unit costs, gains); arrays are aligned."""

    active: np.ndarray
    costs: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        active = np.asarray(self.active, dtype=np.int64).reshape(-1)
        costs = np.asarray(self.costs, dtype=float).reshape(-1)
        gains = np.asarray(self.gains, dtype=float).reshape(-1)
        if active.size == 0:
            raise InvalidInputError("active set is empty")
        if not (active.size == costs.size == gains.size):
            raise InvalidInputError("active, costs and gains must have equal length")
        if np.any(costs <= 0) or np.any(gains <= 0):
            raise InvalidInputError("costs and gains must be positive")
        order = np.argsort(active, kind="stable")
        for name, arr in (("active", active), ("costs", costs), ("gains", gains)):
            arr = arr[order]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(np.diff(self.active) == 0):
            raise InvalidInputError("duplicate UE in active set")

    @classmethod
    def _trusted(cls, active, costs, gains) -> "NetworkState":
        # sampler output is already sorted, aligned and in range
        obj = object.__new__(cls)
        object.__setattr__(obj, "active", active)
        object.__setattr__(obj, "costs", costs)
        object.__setattr__(obj, "gains", gains)
        return obj

    def to_mapping(self) -> dict[str, list]:
        return {"active": self.active.tolist(), "costs": self.costs.tolist(),
                "gains": self.gains.tolist()}

    @classmethod
    def from_mapping(cls, data: Mapping[str, Sequence]) -> "NetworkState":
        return cls(np.asarray(data["active"]), np.asarray(data["costs"]), np.asarray(data["gains"]))


@dataclass(frozen=True)
class Allocation:
    winner: int
    power: float
    rate_target: float
    realized_rate: float
    unit_cost: float

    @property
    def cost(self) -> float:
        return self.power * self.unit_cost


# ---------------------------------------------------------------- sampling

def truncated_rayleigh_cdf(x, params: D2DParams):
    s2 = 2.0 * params.rayleigh_scale ** 2
    lo, hi = params.gamma_min, params.gamma_max
    x = np.clip(x, lo, hi)
    base = np.exp(-lo * lo / s2)
    return (base - np.exp(-x * x / s2)) / (base - np.exp(-hi * hi / s2))


def truncated_rayleigh_ppf(u, params: D2DParams):
    s2 = 2.0 * params.rayleigh_scale ** 2
    lo, hi = params.gamma_min, params.gamma_max
    base = np.exp(-lo * lo / s2)
    top = np.exp(-hi * hi / s2)
    return np.sqrt(-s2 * np.log(base - np.asarray(u) * (base - top)))


def sample_gains(params: D2DParams, rng: np.random.Generator, shape) -> np.ndarray:
    """Rayleigh(sigma) draws rejection-sampled into [gamma_min, gamma_max]."""
    out = rng.rayleigh(params.rayleigh_scale, size=shape)
    bad = (out < params.gamma_min) | (out > params.gamma_max)
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > params.max_rejections:
            raise ConfigurationError(
                f"gain rejection sampling exhausted {params.max_rejections} rounds; "
                f"rayleigh_scale={params.rayleigh_scale} puts almost no mass in "
                f"[{params.gamma_min}, {params.gamma_max}]")
        out[bad] = rng.rayleigh(params.rayleigh_scale, size=int(bad.sum()))
        bad = (out < params.gamma_min) | (out > params.gamma_max)
    return out


def sample_states(params: D2DParams, rng: np.random.Generator, count: int) -> list[NetworkState]:
    M = params.num_ues
    sizes = rng.integers(params.active_min, params.active_max + 1, size=count)
    # a random permutation per slot; the first `size` entries form the active set
    perm = np.argsort(rng.random((count, M)), axis=1)
    gains = sample_gains(params, rng, (count, M))
    if params.unit_cost_mode == "index":
        costs = np.broadcast_to(np.arange(1, M + 1, dtype=float), (count, M))
    else:
        costs = rng.uniform(params.unit_cost_low, params.unit_cost_high, size=(count, M))
    states = []
    for k in range(count):
        ues = np.sort(perm[k, :sizes[k]])
        states.append(NetworkState._trusted(ues, costs[k, ues], gains[k, ues]))
    return states


def sample_state(params: D2DParams, rng: np.random.Generator) -> NetworkState:
    return sample_states(params, rng, 1)[0]


# ------------------------------------------------------------ closed forms

def power_candidate(lam, cost, params: D2DParams):
    """Maximizer of lam * R(p) - c p over C_min <= c p <= C_max."""
    if isinstance(lam, float) and isinstance(cost, float):
        if cost <= 0:
            raise InvalidInputError("unit cost must be positive")
        return transaction_cost(lam, params) / cost
    cost = np.asarray(cost, dtype=float)
    if np.any(cost <= 0):
        raise InvalidInputError("unit cost must be positive")
    W = params.bandwidth
    out = np.clip(W * np.asarray(lam, dtype=float) / (cost * params.kappa),
                  params.cost_min / cost, params.cost_max / cost)
    return out if out.ndim else float(out)


def transaction_cost(lam, params: D2DParams):
    """c * p at the optimal power; identical for every UE."""
    if isinstance(lam, float):
        return min(max(params.bandwidth * lam / params.kappa, params.cost_min), params.cost_max)
    lam = np.asarray(lam, dtype=float)
    out = np.clip(params.bandwidth * lam / params.kappa, params.cost_min, params.cost_max)
    return out if out.ndim else float(out)


def rate_choice(lam, params: D2DParams):
    """argmax of ln r - lam r over [r_min, r_max]; lam = 0 maps to r_max."""
    if isinstance(lam, float):
        if lam <= 0:
            return float(params.rate_max)
        return min(max(1.0 / lam, params.rate_min), params.rate_max)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        inv = np.where(lam > 0, 1.0 / np.where(lam > 0, lam, 1.0), np.inf)
    out = np.clip(inv, params.rate_min, params.rate_max)
    return out if out.ndim else float(out)


def utility(r):
    return np.log(r)


def link_rate(power, gain, ue, params: D2DParams):
    R = params.bandwidth * params.log(np.asarray(power) * np.asarray(gain) / params.alpha)
    if params.fading is Fading.FAST:
        R = R + params.bandwidth * params.psi_array[np.asarray(ue)]
    return R


def winner_scores(state: NetworkState, params: D2DParams) -> np.ndarray:
    if params.fading is Fading.SLOW:
        return state.gains / state.costs
    return params.log(state.gains / state.costs) + params.psi_array[state.active]


def _winner_pos(state: NetworkState, params: D2DParams) -> int:
    # np.argmax returns the first maximum; active is sorted so ties go to the smallest index
    return int(np.argmax(winner_scores(state, params)))


def select_user(state: NetworkState, params: D2DParams) -> int:
    if state.active.size == 0:
        raise InvalidInputError("empty active set")
    return int(state.active[_winner_pos(state, params)])


def winner_offset(state: NetworkState, params: D2DParams) -> float:
    """lambda-free part of the slot rate: W log(gamma/c) (+ W psi) of the winner."""
    k = _winner_pos(state, params)
    val = params.bandwidth * params.log(state.gains[k] / state.costs[k])
    if params.fading is Fading.FAST:
        val += params.bandwidth * params.psi[int(state.active[k])]
    return float(val)


def allocate(lam: float, state: NetworkState, params: D2DParams) -> Allocation:
    lam = float(lam)
    k = _winner_pos(state, params)
    ue = int(state.active[k])
    c = float(state.costs[k])
    p = power_candidate(lam, c, params)
    R = params.bandwidth * math.log(p * float(state.gains[k]) / params.alpha) / params.kappa
    if params.fading is Fading.FAST:
        R += params.bandwidth * params.psi[ue]
    return Allocation(winner=ue, power=p, rate_target=rate_choice(lam, params),
                      realized_rate=R, unit_cost=c)


def slot_subgradient(lam: float, state: NetworkState, params: D2DParams, slot: int = 0) -> SubgradientSample:
    a = allocate(lam, state, params)
    return SubgradientSample(np.array([a.realized_rate - a.rate_target]), slot=slot)


def dual_slot_update(lam: float, state: NetworkState, params: D2DParams, epsilon: float,
                     lambda_max: float = 50.0) -> float:
    if not 0 <= lam <= lambda_max:
        raise InvalidInputError(f"dual {lam} outside [0, {lambda_max}]")
    f = slot_subgradient(lam, state, params).value[0]
    return float(min(max(lam - epsilon * f, 0.0), lambda_max))


def subgradient_bound(params: D2DParams) -> float:
    c_lo = params.unit_cost_support[0]
    if c_lo <= 0:
        raise InvalidInputError("minimum unit cost must be positive")
    G = params.bandwidth * float(params.log(params.cost_max * params.gamma_max / (params.alpha * c_lo)))
    G += params.rate_max
    if params.fading is Fading.FAST:
        G += params.bandwidth * params.psi_max
    return G


# --------------------------------------------------- expectations over states

@dataclass(frozen=True)
class ScoreMean:
    """E[winner_offset] together with how it was obtained."""

    value: float
    stderr: float = 0.0
    method: str = "exact"


def score_mean_exact(states: Sequence[NetworkState], probs, params: D2DParams) -> ScoreMean:
    offs = np.array([winner_offset(s, params) for s in states])
    return ScoreMean(float(np.dot(np.asarray(probs, dtype=float), offs)), 0.0, "exact")


def score_mean_monte_carlo(params: D2DParams, samples: int, seed: int = 0,
                           batch: int = 50_000) -> ScoreMean:
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        n = min(batch, samples - done)
        vals = np.array([winner_offset(s, params) for s in sample_states(params, rng, n)])
        total += vals.sum()
        total_sq += (vals * vals).sum()
        done += n
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0) * samples / max(samples - 1, 1)
    return ScoreMean(mean, math.sqrt(var / samples), "monte-carlo")


def _elementary_symmetric(values: np.ndarray) -> np.ndarray:
    """e_0..e_M of the given numbers by the standard recurrence."""
    e = np.zeros(values.size + 1)
    e[0] = 1.0
    for v in values:
        e[1:] = e[1:] + v * e[:-1]
    return e


def score_mean_quadrature(params: D2DParams, tol: float = 1e-11) -> ScoreMean:
    """E[max_i log(gamma_i/c_i) (+ psi_i)] by one-dimensional quadrature.

    The winner's score is the maximum of independent per-UE scores over a
    uniformly random subset of uniformly random size. Its cdf is
    E_S[e_S(F_1(x), ..., F_M(x)) / C(M, S)] with e_S the elementary
    symmetric polynomial; E[max] follows from integrating 1 - cdf.
    """
    M = params.num_ues
    base = math.e if params.log_base is LogBase.NATURAL else 2.0
    psi = params.psi_array if params.fading is Fading.FAST else np.zeros(M)
    c_lo, c_hi = params.unit_cost_support
    sizes = np.arange(params.active_min, params.active_max + 1)
    binom = np.array([math.comb(M, int(s)) for s in sizes], dtype=float)

    def log_b(x):
        return math.log(x) / math.log(base)

    if params.unit_cost_mode == "index":
        costs = np.arange(1, M + 1, dtype=float)

        def per_ue_cdf(x):
            return truncated_rayleigh_cdf(costs * base ** (x - psi), params)
    else:
        def per_ue_cdf(x):
            val, _ = integrate.quad_vec(
                lambda c: truncated_rayleigh_cdf(c * base ** (x - psi), params),
                c_lo, c_hi, epsabs=tol, epsrel=tol)
            return val / (c_hi - c_lo)

    def cdf_max(x):
        e = _elementary_symmetric(per_ue_cdf(x))
        return float(np.mean(e[sizes] / binom))

    x_lo = log_b(params.gamma_min / c_hi) + psi.min()
    x_hi = log_b(params.gamma_max / c_lo) + psi.max()
    # kinks of the per-UE cdfs at the support edges help quad
    pts = []
    if params.unit_cost_mode == "index":
        for i in range(M):
            for g in (params.gamma_min, params.gamma_max):
                p = log_b(g / (i + 1)) + psi[i]
                if x_lo < p < x_hi:
                    pts.append(p)
    pts = sorted(set(pts))
    edges = [x_lo] + pts + [x_hi]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(lambda x: 1.0 - cdf_max(x), a, b, epsabs=tol, epsrel=tol, limit=200)
        total += val
    return ScoreMean(params.bandwidth * (x_lo + total), 0.0, "quadrature")


def mean_subgradient(lam, params: D2DParams, mean: ScoreMean):
    """Exact E[f_t(lambda)] given the mean winner offset."""
    if isinstance(lam, float):
        q = transaction_cost(lam, params)
        return (params.bandwidth * math.log(q / params.alpha) / params.kappa + mean.value
                - rate_choice(lam, params))
    q = transaction_cost(lam, params)
    return params.bandwidth * params.log(np.asarray(q) / params.alpha) + mean.value - rate_choice(lam, params)


def dual_function(lam, params: D2DParams, mean: ScoreMean):
    """g(lambda) = max_r [U(r) - lam r] + E[max over the slot power set]."""
    lam = np.asarray(lam, dtype=float)
    r = rate_choice(lam, params)
    q = transaction_cost(lam, params)
    power_part = lam * (params.bandwidth * params.log(np.asarray(q) / params.alpha) + mean.value) - q
    out = utility(r) - lam * r + power_part
    return out if np.ndim(out) else float(out)


def slot_objective(lam: float, state: NetworkState, params: D2DParams) -> float:
    """Attained slot Lagrangian U(r) - lam r + lam R - c p at the closed form."""
    a = allocate(lam, state, params)
    return float(utility(a.rate_target) - lam * a.rate_target + lam * a.realized_rate - a.cost)


def subgradient_error(lam: float, state: NetworkState, params: D2DParams, mean) -> float:
    """e_t(lambda) = f_t(lambda) - E f_t(lambda); the lambda-dependent parts cancel."""
    if not lam >= 0:
        raise InvalidInputError("dual must be non-negative")
    m = mean.value if isinstance(mean, ScoreMean) else float(mean)
    return winner_offset(state, params) - m


# ------------------------------------------------------- regularity checks

@dataclass(frozen=True)
class SlaterReport:
    margin: float
    stderr: float
    feasible: bool
    rate: float                 # r~ = r_min
    power_rule: str = "C_max / c on the winning UE"


def slater_check(params: D2DParams, mean: ScoreMean) -> SlaterReport:
    """Constraint margin of r = r_min with full-budget power on the winner.

    E[max_i R_i(C_max/c_i, gamma_i)] = W log(C_max/alpha) + E[winner offset].
    """
    margin = params.bandwidth * float(params.log(params.cost_max / params.alpha)) + mean.value - params.rate_min
    return SlaterReport(margin=margin, stderr=params.bandwidth * mean.stderr if mean.stderr else 0.0,
                        feasible=margin > 0, rate=params.rate_min)


def slater_objective(params: D2DParams) -> float:
    return float(utility(params.rate_min)) - params.cost_max


def lambda_max_rule(params: D2DParams, slater: SlaterReport, any_dual: float, dual_eval: float,
                    headroom: float = 10.0) -> float:
    """Box size for the dual iterates from a Slater point.

    ||lambda*|| <= (g(lam~) - f0(x~)) / chi, floored at 1/r_min and scaled by
    ``headroom``. f0(x~) includes the Slater point's cost C_max.
    """
    if not slater.margin > 0:
        raise ConfigurationError(
            f"Slater margin {slater.margin:.4g} <= 0: r_min is not strictly feasible")
    if any_dual < 0:
        raise InvalidInputError("any_dual must be non-negative")
    bound = (dual_eval - slater_objective(params)) / slater.margin
    return headroom * max(bound, 1.0 / params.rate_min)


# ------------------------------------------------------------------ problem

class D2DProblem(StochasticProblem):
    """Adapter exposing the D2D slot problem to the generic solver.

    With ``distribution`` (anything with ``atoms`` and ``probs``) states are
    drawn from that finite support and expectations are exact. Otherwise
    states come from the continuous model and ``score_mean`` (if given)
    supplies E[f_t] and g.
    """

    info_fields = ("winner", "power", "rate_target", "realized_rate", "unit_cost", "cost")

    def __init__(self, params: D2DParams, distribution=None, score_mean: ScoreMean | None = None):
        self.params = params
        self.distribution = distribution
        if distribution is not None and score_mean is None:
            score_mean = score_mean_exact(distribution.atoms, distribution.probs, params)
        self.score_mean = score_mean
        self._G = subgradient_bound(params)

    @property
    def dim(self) -> int:
        return 1

    @property
    def allocation_dim(self) -> int:
        return 2  # x = (r, z) with z = -c p

    @property
    def subgradient_bound(self) -> float:
        return self._G

    def sample_state(self, rng):
        return self.sample_states(rng, 1)[0]

    def sample_states(self, rng, count):
        if self.distribution is None:
            return sample_states(self.params, rng, count)
        idx = rng.choice(len(self.distribution.atoms), size=count, p=self.distribution.probs)
        atoms = self.distribution.atoms
        return [atoms[i] for i in idx]

    def solve(self, lam, state):
        lam0 = float(lam[0])
        a = allocate(lam0, state, self.params)
        f = a.realized_rate - a.rate_target
        cost = a.cost
        lagr = float(np.log(a.rate_target)) - cost + lam0 * f
        return SlotSolution(
            allocation=np.array([a.rate_target, -cost]),
            subgradient=np.array([f]),
            lagrangian=lagr,
            info={"winner": a.winner, "power": a.power, "rate_target": a.rate_target,
                  "realized_rate": a.realized_rate, "unit_cost": a.unit_cost, "cost": cost},
        )

    def objective(self, allocation):
        x = np.asarray(allocation, dtype=float)
        return float(np.log(x[..., 0]) + x[..., 1]) if x.ndim == 1 else np.log(x[..., 0]) + x[..., 1]

    def mean_subgradient(self, lam):
        if self.score_mean is None:
            return None
        return np.array([mean_subgradient(float(lam[0]), self.params, self.score_mean)])

    def dual_value(self, lam):
        if self.score_mean is None:
            return None
        lam = np.asarray(lam, dtype=float)
        return dual_function(lam[..., 0], self.params, self.score_mean)

    def expected_allocation(self, lam) -> np.ndarray:
        """x(lambda) = (r(lambda), -E[c p]); state-free for this problem."""
        lam = np.asarray(lam, dtype=float).reshape(-1)
        return np.stack([rate_choice(lam, self.params), -transaction_cost(lam, self.params)], axis=-1)
