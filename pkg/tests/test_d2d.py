import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from ssdrate import d2d, oracle
from ssdrate.d2d import D2DParams, D2DProblem, Fading, NetworkState, ScoreMean
from ssdrate.solver import ConfigurationError, DualVector, InvalidInputError, SolverConfig, run, state_sequence

LN2 = math.log(2.0)

# lambda_t and f_t of the first 10 slots, fast fading defaults, eps = 0.01, seed 42
GOLDEN_DUAL = [0.0, 0.0825515040331941, 0.15025453221121346, 0.18202811395561075, 0.2076775819939685,
               0.21522603489433012, 0.21091729806812842, 0.23181478062485267, 0.24137444847798434,
               0.23718435038572713]
GOLDEN_F = [-8.25515040331941, -6.770302817801936, -3.17735817443973, -2.564946803835773,
            -0.7548452900361635, 0.43087368262016934, -2.089748255672424, -0.9559667853131684,
            0.4190098092257202, -0.530866715066725]
GOLDEN_WINNERS = [22, 0, 1, 1, 1, 0, 7, 3, 0, 0]


def state(ues, gains, costs):
    return NetworkState(np.array(ues), np.array(costs, dtype=float), np.array(gains, dtype=float))


@pytest.fixture(scope="module")
def million(vi_params):
    """Winner offsets and subgradients over 10^6 i.i.d. slots at random duals."""
    rng = np.random.default_rng(2024)
    offsets, fs = [], []
    for _ in range(10):
        states = d2d.sample_states(vi_params, rng, 100_000)
        lams = 10.0 ** rng.uniform(-3, math.log10(50.0), size=len(states))
        for lam, s in zip(lams, states):
            a = d2d.allocate(float(lam), s, vi_params)
            offsets.append(d2d.winner_offset(s, vi_params))
            fs.append(a.realized_rate - a.rate_target)
    return np.array(offsets), np.array(fs)


@pytest.fixture(scope="module")
def quad_mean(vi_params):
    return d2d.score_mean_quadrature(vi_params)


# ---------------------------------------------------------------- params

def test_params_defaults():
    p = D2DParams()
    assert (p.num_ues, p.cost_min, p.cost_max, p.rate_min, p.rate_max) == (25, 1, 25, 0.2, 10)
    assert p.psi == (1.0,) * 25 and p.alpha == 1 and p.bandwidth == 1
    assert p.kappa == 1.0 and D2DParams(log_base="base2").kappa == pytest.approx(LN2)


@pytest.mark.parametrize("bad", [dict(cost_min=30), dict(rate_min=11), dict(gamma_min=70),
                                 dict(active_min=0), dict(active_max=26), dict(psi=(1.0,) * 3),
                                 dict(unit_cost_mode="other"), dict(alpha=0)])
def test_params_invariants(bad):
    with pytest.raises(ConfigurationError):
        D2DParams(**bad)


def test_params_mapping_roundtrip():
    p = D2DParams(fading="slow", log_base="base2", rayleigh_scale=10)
    assert D2DParams.from_mapping(p.to_mapping()) == p
    assert D2DParams.from_mapping({"psi": 2}).psi == (2.0,) * 25
    with pytest.raises(ConfigurationError):
        D2DParams.from_mapping({"sigma": 3})


def test_network_state_validation():
    with pytest.raises(InvalidInputError):
        state([], [], [])
    with pytest.raises(InvalidInputError):
        state([0], [1.0], [0.0])
    s = state([3, 1], [2.0, 5.0], [4.0, 2.0])
    assert s.active.tolist() == [1, 3] and s.gains.tolist() == [5.0, 2.0]
    assert NetworkState.from_mapping(s.to_mapping()).to_mapping() == s.to_mapping()


# -------------------------------------------------------------- sampling

def test_sample_state_vi_config(vi_params):
    rng = np.random.default_rng(0)
    for s in d2d.sample_states(vi_params, rng, 2000):
        assert 5 <= s.active.size <= 25
        assert np.all((s.gains >= 0.1) & (s.gains <= 65))
        assert np.array_equal(s.costs, s.active + 1.0)
        assert np.all(np.diff(s.active) > 0)


def test_sample_state_forced_full_set():
    p = D2DParams(active_min=25, active_max=25)
    s = d2d.sample_state(p, np.random.default_rng(1))
    assert s.active.tolist() == list(range(25))


def test_sample_state_sizes_uniform(vi_params):
    sizes = np.array([s.active.size for s in d2d.sample_states(vi_params, np.random.default_rng(5), 42_000)])
    counts = np.bincount(sizes, minlength=26)[5:]
    expected = len(sizes) / 21
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < 45.3  # 99.9% quantile, 20 dof


def test_sample_state_uniform_costs():
    p = D2DParams(unit_cost_mode="uniform", unit_cost_low=2, unit_cost_high=7)
    costs = np.concatenate([s.costs for s in d2d.sample_states(p, np.random.default_rng(2), 500)])
    assert costs.min() >= 2 and costs.max() <= 7
    assert abs(costs.mean() - 4.5) < 0.1


def test_gain_mean_matches_truncated_density(vi_params):
    sigma, lo, hi = 20.0, 0.1, 65.0
    dens = lambda x: x / sigma**2 * math.exp(-x * x / (2 * sigma**2))
    mass = integrate.quad(dens, lo, hi)[0]
    mean = integrate.quad(lambda x: x * dens(x), lo, hi)[0] / mass
    g = d2d.sample_gains(vi_params, np.random.default_rng(3), 1_000_000)
    assert g.min() >= lo and g.max() <= hi
    assert abs(g.mean() - mean) < 4 * g.std() / 1000


def test_gain_sampler_degenerate_scale():
    p = D2DParams(rayleigh_scale=1e-3, gamma_min=50, gamma_max=60, max_rejections=5)
    with pytest.raises(ConfigurationError):
        d2d.sample_gains(p, np.random.default_rng(0), 10)


# ---------------------------------------------------------- closed forms

def test_power_candidate_examples():
    p = D2DParams()
    assert d2d.power_candidate(10.0, 2.0, p) == 5.0
    assert d2d.power_candidate(0.5, 1.0, p) == 1.0
    assert d2d.power_candidate(100.0, 2.0, p) == 12.5
    with pytest.raises(InvalidInputError):
        d2d.power_candidate(1.0, 0.0, p)


def test_power_candidate_base2_correction():
    p = D2DParams(log_base="base2")
    assert d2d.power_candidate(10.0, 2.0, p) == pytest.approx(5.0 / LN2)


@pytest.mark.parametrize("base", ["natural", "base2"])
@given(lam=st.floats(0.01, 60.0), c=st.floats(1.0, 25.0), gamma=st.floats(0.1, 65.0))
def test_power_candidate_matches_grid(base, lam, c, gamma):
    p = D2DParams(log_base=base)
    grid = np.linspace(p.cost_min / c, p.cost_max / c, 100_000)
    obj = lam * p.log(grid * gamma) - c * grid
    step = grid[1] - grid[0]
    assert abs(grid[np.argmax(obj)] - d2d.power_candidate(lam, c, p)) <= step


def test_select_user_examples():
    slow = D2DParams(num_ues=2, active_min=1, active_max=2, fading="slow")
    assert d2d.select_user(state([0, 1], [4, 9], [2, 3]), slow) == 1
    fast = D2DParams(num_ues=2, active_min=1, active_max=2, psi=(0.0, 2.0))
    assert d2d.select_user(state([0, 1], [2, 1], [1, 1]), fast) == 1


def test_select_user_ties_go_to_smallest_index():
    p = D2DParams(num_ues=3, active_min=1, active_max=3, fading="slow")
    assert d2d.select_user(state([2, 0, 1], [2, 2, 2], [1, 1, 1]), p) == 0


@given(st.integers(0, 10**6))
def test_select_user_is_direct_argmax_for_all_duals(seed):
    p = D2DParams()
    s = d2d.sample_state(p, np.random.default_rng(seed))
    chosen = d2d.select_user(s, p)
    for lam in np.logspace(-2, 2, 20):
        vals = oracle.direct_user_objectives(float(lam), s, p)
        best = max(vals.values())
        # chosen user attains the maximum (up to rounding)
        assert vals[chosen] >= best - 1e-12 * max(1.0, abs(best))


@pytest.mark.parametrize("lam,r", [(2.0, 0.5), (0.05, 10.0), (10.0, 0.2), (0.0, 10.0)])
def test_rate_choice_examples(lam, r):
    assert d2d.rate_choice(lam, D2DParams()) == r


@given(st.floats(0.0, 100.0))
def test_rate_choice_is_argmax(lam):
    p = D2DParams()
    grid = np.linspace(0.2, 10.0, 20_001)
    r = d2d.rate_choice(lam, p)
    assert math.log(r) - lam * r >= np.max(np.log(grid) - lam * grid) - 1e-12


def test_slot_subgradient_examples(one_user):
    params, s = one_user
    assert d2d.slot_subgradient(1.0, s, params).value.tolist() == [-1.0]
    fast = params.replace(fading=Fading.FAST, psi=(2.0,))
    assert d2d.slot_subgradient(1.0, s, fast).value.tolist() == [1.0]


def test_dual_slot_update_examples(one_user):
    params, s = one_user
    assert d2d.dual_slot_update(1.0, s, params, 0.1) == pytest.approx(1.1)
    # f = 19 - 10 = 9 at lam = 0.05
    hot = params.replace(fading=Fading.FAST, psi=(19.0,))
    assert d2d.slot_subgradient(0.05, s, hot).value[0] == pytest.approx(9.0)
    assert d2d.dual_slot_update(0.05, s, hot, 0.1) == 0.0


def test_golden_trace(vi_params, quad_mean):
    prob = D2DProblem(vi_params, score_mean=quad_mean)
    tr = run(prob, SolverConfig(0.01, 10, DualVector.zeros(1, 50.0), seed=42))
    assert len(tr) == 10
    np.testing.assert_allclose(tr.dual[:, 0], GOLDEN_DUAL, rtol=0, atol=1e-12)
    np.testing.assert_allclose(tr.subgradient[:, 0], GOLDEN_F, rtol=0, atol=1e-12)
    assert tr.info["winner"].astype(int).tolist() == GOLDEN_WINNERS
    assert np.all(np.abs(tr.subgradient) <= prob.subgradient_bound)
    first = state_sequence(prob, 42, 10)[0]
    assert d2d.dual_slot_update(0.0, first, vi_params, 0.01) == tr.dual[1, 0]


# ---------------------------------------------------------------- bounds

def test_subgradient_bound_examples():
    slow = D2DParams(fading="slow", log_base="base2")
    assert d2d.subgradient_bound(slow) == pytest.approx(math.log2(1625) + 10, abs=1e-12)
    assert d2d.subgradient_bound(slow) == pytest.approx(20.666, abs=1e-3)
    fast = D2DParams(log_base="base2")
    assert d2d.subgradient_bound(fast) == pytest.approx(21.666, abs=1e-3)


def test_subgradient_bound_dominates_million_slots(vi_params, million):
    _, f = million
    assert np.max(np.abs(f)) <= d2d.subgradient_bound(vi_params)


@given(st.integers(0, 2**32), st.floats(0.0, 50.0))
def test_cost_box_and_bound_every_slot(seed, lam):
    p = D2DParams()
    s = d2d.sample_state(p, np.random.default_rng(seed))
    a = d2d.allocate(lam, s, p)
    assert p.cost_min - 1e-12 <= a.cost <= p.cost_max + 1e-12
    assert a.winner in s.active.tolist()
    assert abs(a.realized_rate - a.rate_target) <= d2d.subgradient_bound(p)


# ----------------------------------------------------------- expectations

def test_quadrature_mean_matches_monte_carlo(million, quad_mean):
    off, _ = million
    assert abs(off.mean() - quad_mean.value) < 4 * off.std() / 1000


@pytest.mark.parametrize("changes", [dict(fading="slow"), dict(log_base="base2"),
                                     dict(active_min=10, active_max=12, rayleigh_scale=8)])
def test_quadrature_mean_other_modes(changes):
    p = D2DParams(**changes)
    mc = d2d.score_mean_monte_carlo(p, 100_000, seed=9)
    assert abs(d2d.score_mean_quadrature(p).value - mc.value) < 4 * mc.stderr


def test_zero_mean_error(million, quad_mean):
    off, _ = million
    e = off - quad_mean.value
    assert abs(e.mean()) <= 4 * e.std() / 1e3


def test_subgradient_error_examples(one_user):
    params, s = one_user
    mean = d2d.score_mean_exact([s], [1.0], params)
    assert [d2d.subgradient_error(l, s, params, mean) for l in (0.01, 1.0, 100.0)] == [0.0] * 3
    two = D2DParams(num_ues=1, active_min=1, active_max=1, fading="slow")
    atoms = [state([0], [1.0], [1.0]), state([0], [math.exp(2)], [1.0])]
    m2 = d2d.score_mean_exact(atoms, [0.5, 0.5], two)
    assert m2.value == pytest.approx(1.0)
    assert d2d.subgradient_error(1.0, atoms[0], two, m2) == pytest.approx(-1.0)
    assert d2d.subgradient_error(1.0, atoms[1], two, m2) == pytest.approx(1.0)


def test_subgradient_error_identical_across_duals(vi_params, quad_mean):
    s = d2d.sample_state(vi_params, np.random.default_rng(8))
    vals = [d2d.subgradient_error(l, s, vi_params, quad_mean) for l in (0.01, 1.0, 100.0)]
    assert max(vals) - min(vals) <= 1e-12


@given(st.integers(0, 2**32), st.floats(0.0, 50.0), st.floats(0.0, 50.0))
def test_subgradient_error_lambda_free(seed, l1, l2):
    p = D2DParams()
    mean = ScoreMean(3.75)
    s = d2d.sample_state(p, np.random.default_rng(seed))
    assert d2d.subgradient_error(l1, s, p, mean) == d2d.subgradient_error(l2, s, p, mean)
    e1 = d2d.slot_subgradient(l1, s, p).value[0] - d2d.mean_subgradient(l1, p, mean)
    e2 = d2d.slot_subgradient(l2, s, p).value[0] - d2d.mean_subgradient(l2, p, mean)
    assert abs(e1 - e2) <= 1e-12


# ------------------------------------------------------- Slater and lambda_max

def test_slater_single_user(one_user):
    params, s = one_user
    mean = d2d.score_mean_exact([s], [1.0], params)
    rep = d2d.slater_check(params, mean)
    assert rep.margin == pytest.approx(math.log(25) - 0.2) and rep.feasible
    assert rep.rate == params.rate_min
    bad = d2d.slater_check(params.replace(rate_min=3.5), mean)
    assert bad.margin < 0 and not bad.feasible


def test_slater_monte_carlo_vi(vi_params, million, quad_mean):
    off, _ = million
    mc = ScoreMean(float(off.mean()), float(off.std() / 1000), "monte-carlo")
    rep = d2d.slater_check(vi_params, mc)
    assert rep.feasible and rep.stderr > 0
    assert abs(rep.margin - d2d.slater_check(vi_params, quad_mean).margin) < 4 * rep.stderr


def test_lambda_max_floor():
    p = D2DParams()
    rep = d2d.SlaterReport(margin=1e6, stderr=0.0, feasible=True, rate=0.2)
    assert d2d.lambda_max_rule(p, rep, 1.0, 0.0) == pytest.approx(50.0)


def test_lambda_max_decreases_with_margin():
    p = D2DParams()
    vals = [d2d.lambda_max_rule(p, d2d.SlaterReport(m, 0.0, True, 0.2), 1.0, 5.0) for m in (1, 2, 4, 8, 1e3)]
    assert all(b <= a for a, b in zip(vals, vals[1:])) and vals[-1] == pytest.approx(50.0)


def test_lambda_max_single_user_by_hand(one_user):
    params, s = one_user
    chi = math.log(25) - 0.2
    g1 = (math.log(1.0) - 1.0) + (math.log(1.0) - 1.0)  # both slot maximizers at 1
    f0_slater = math.log(0.2) - 25.0  # r = r_min while spending C_max
    expected = 10 * max((g1 - f0_slater) / chi, 1 / 0.2)
    mean = d2d.score_mean_exact([s], [1.0], params)
    g = float(d2d.dual_function(1.0, params, mean))
    assert g == pytest.approx(-2.0, abs=1e-15)
    got = d2d.lambda_max_rule(params, d2d.slater_check(params, mean), 1.0, g)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(81.518, abs=1e-3)


def test_lambda_max_infeasible(one_user):
    params, s = one_user
    rep = d2d.slater_check(params.replace(rate_min=3.5), d2d.score_mean_exact([s], [1.0], params))
    with pytest.raises(ConfigurationError):
        d2d.lambda_max_rule(params, rep, 1.0, 0.0)


# ---------------------------------------------------------------- problem

def test_problem_expectations_match_sampling(vi_params, quad_mean):
    prob = D2DProblem(vi_params, score_mean=quad_mean)
    lam = np.array([0.4])
    rng = np.random.default_rng(6)
    sols = [prob.solve(lam, s) for s in prob.sample_states(rng, 50_000)]
    f = np.array([x.subgradient[0] for x in sols])
    L = np.array([x.lagrangian for x in sols])
    assert abs(f.mean() - prob.mean_subgradient(lam)[0]) < 4 * f.std() / math.sqrt(len(f))
    assert abs(L.mean() - prob.dual_value(lam)) < 4 * L.std() / math.sqrt(len(L))


def test_problem_without_mean_has_no_expectations(vi_params):
    prob = D2DProblem(vi_params)
    assert prob.mean_subgradient(np.array([1.0])) is None and prob.dual_value(np.array([1.0])) is None
