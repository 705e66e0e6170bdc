"""Reference UE-selection policies and the comparison metrics.

Both baselines transmit at a scaled "maximum" power s * C_max / c clamped
back into the cost box, and the scale s is tuned so that every policy
spends the same aggregate power as the proposed one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .d2d import Allocation, D2DParams, NetworkState, link_rate
from .solver import InvalidInputError, Trace


@dataclass(frozen=True)
class PolicyMetrics:
    downloaded_data: float
    cost_incurred: float
    avg_utility_minus_penalty: float
    slotwise_utility_minus_penalty: float
    total_power: float
    slots: int

    def __post_init__(self):
        if self.downloaded_data < 0 or self.cost_incurred < 0:
            raise InvalidInputError("data and cost must be non-negative")


def scaled_max_power(unit_cost, params: D2DParams, scale: float = 1.0):
    c = np.asarray(unit_cost, dtype=float)
    out = np.clip(scale * params.cost_max / c, params.cost_min / c, params.cost_max / c)
    return out if out.ndim else float(out)


def _allocation(state: NetworkState, pos: int, params: D2DParams, scale: float) -> Allocation:
    ue, c, g = int(state.active[pos]), float(state.costs[pos]), float(state.gains[pos])
    p = scaled_max_power(c, params, scale)
    return Allocation(winner=ue, power=p, rate_target=math.nan,
                      realized_rate=float(link_rate(p, g, ue, params)), unit_cost=c)


def random_policy(state: NetworkState, rng: np.random.Generator, params: D2DParams,
                  scale: float = 1.0) -> Allocation:
    """Uniformly random active UE at scaled maximum power."""
    if state.active.size == 0:
        raise InvalidInputError("empty active set")
    return _allocation(state, int(rng.integers(state.active.size)), params, scale)


def opportunistic_policy(state: NetworkState, params: D2DParams, scale: float = 1.0) -> Allocation:
    """Cheapest active UE (smallest index on ties) at scaled maximum power."""
    if state.active.size == 0:
        raise InvalidInputError("empty active set")
    return _allocation(state, int(np.argmin(state.costs)), params, scale)


@dataclass(frozen=True)
class PolicyRun:
    """Fixed winners of a baseline on a state sequence; power depends on the scale."""
    name: str
    states: tuple[NetworkState, ...]
    positions: np.ndarray

    @property
    def unit_costs(self) -> np.ndarray:
        return np.array([s.costs[k] for s, k in zip(self.states, self.positions)])

    def total_power(self, params: D2DParams, scale: float) -> float:
        return float(np.sum(scaled_max_power(self.unit_costs, params, scale)))

    def allocations(self, params: D2DParams, scale: float) -> list[Allocation]:
        return [_allocation(s, int(k), params, scale) for s, k in zip(self.states, self.positions)]


def random_run(states: Sequence[NetworkState], seed: int) -> PolicyRun:
    rng = np.random.default_rng(seed)
    pos = np.array([int(rng.integers(s.active.size)) for s in states])
    return PolicyRun("random", tuple(states), pos)


def opportunistic_run(states: Sequence[NetworkState]) -> PolicyRun:
    return PolicyRun("opportunistic", tuple(states), np.array([int(np.argmin(s.costs)) for s in states]))


@dataclass(frozen=True)
class PowerMatch:
    scale: float
    target_power: float
    achieved_power: float
    matched: bool

    @property
    def residual(self) -> float:
        """Relative discrepancy achieved/target - 1."""
        return self.achieved_power / self.target_power - 1.0


def matched_power_scaling(target_power: float, policy: PolicyRun, params: D2DParams,
                          rel_tol: float = 0.01) -> PowerMatch:
    """Scale s with aggregate power equal to ``target_power``.

    Aggregate power is continuous and non-decreasing in s, so start from
    the proportional guess and finish by bisection. When the cost box
    cannot reach the target the nearest end is used and the result is
    flagged as unmatched.
    """
    if target_power <= 0:
        raise InvalidInputError("target power must be positive")
    lo_s = params.cost_min / params.cost_max
    floor_p, ceil_p = policy.total_power(params, lo_s), policy.total_power(params, 1.0)
    if target_power < floor_p:
        return PowerMatch(lo_s, target_power, floor_p, floor_p <= target_power * (1 + rel_tol))
    if target_power > ceil_p:
        return PowerMatch(1.0, target_power, ceil_p, ceil_p >= target_power * (1 - rel_tol))
    guess = min(max(target_power / ceil_p, lo_s), 1.0)
    if abs(policy.total_power(params, guess) / target_power - 1) <= 1e-12:
        return PowerMatch(guess, target_power, policy.total_power(params, guess), True)
    a, b = lo_s, 1.0
    for _ in range(200):
        mid = 0.5 * (a + b)
        if policy.total_power(params, mid) < target_power:
            a = mid
        else:
            b = mid
        if b - a < 1e-15:
            break
    s = 0.5 * (a + b)
    achieved = policy.total_power(params, s)
    return PowerMatch(s, target_power, achieved, abs(achieved / target_power - 1) <= rel_tol)


def allocations_from_trace(trace: Trace) -> list[Allocation]:
    info = trace.info
    return [Allocation(winner=int(info["winner"][t]), power=float(info["power"][t]),
                       rate_target=float(info["rate_target"][t]),
                       realized_rate=float(info["realized_rate"][t]),
                       unit_cost=float(info["unit_cost"][t])) for t in range(len(trace))]


def table1_metrics(allocations: Sequence[Allocation], params: D2DParams,
                   slot_duration: float = 1.0) -> PolicyMetrics:
    """Downloaded data, cost, and utility minus penalty of a policy run.

    The run-level figure is U(r) - mean cost where r is the mean delivered
    rate, capped by the mean rate target when the policy sets one, and
    clipped to the rate box. The slotwise figure averages
    U(clip(R_t)) - c_t p_t instead.
    """
    if len(allocations) == 0:
        raise InvalidInputError("need at least one slot")
    R = np.array([a.realized_rate for a in allocations])
    cost = np.array([a.cost for a in allocations])
    power = np.array([a.power for a in allocations])
    targets = np.array([a.rate_target for a in allocations])
    r = float(np.mean(R))
    if np.all(np.isfinite(targets)):
        r = min(r, float(np.mean(targets)))
    r = min(max(r, params.rate_min), params.rate_max)
    slotwise = np.log(np.clip(R, params.rate_min, params.rate_max)) - cost
    return PolicyMetrics(
        downloaded_data=float(np.sum(np.maximum(R, 0.0)) * slot_duration),
        cost_incurred=float(np.sum(cost)),
        avg_utility_minus_penalty=math.log(r) - float(np.mean(cost)),
        slotwise_utility_minus_penalty=float(np.mean(slotwise)),
        total_power=float(np.sum(power)),
        slots=len(allocations),
    )
