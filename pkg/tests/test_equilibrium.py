import math
from dataclasses import replace

import numpy as np
import pytest

from nomad_mfe.ctmc import solve_kappa
from nomad_mfe.equilibrium import (DistanceContext, MFEProblem, SolverConfig, _consistent,
                                   nelder_mead_minimize, solve_mfe, validate_equilibrium,
                                   validate_point)
from nomad_mfe.errors import ModelError, NotFound
from nomad_mfe.model import ModelParams, SharingFunction, make_resource_process
from nomad_mfe.model import strategy_from_threshold

from oracles import dense_optimal_stopping

pytestmark = pytest.mark.filterwarnings("ignore")


def binary(mu=0.25, alpha=1.0, beta=20.0, gamma=0.95, lam=1.0, g=(0.0, 1.0)):
    return MFEProblem(ModelParams(lam, gamma, beta),
                      make_resource_process([0, 1], [[0, mu], [mu, 0]]),
                      SharingFunction.power(list(g), alpha))


SMALL = SolverConfig(L=40, k=10)


@pytest.fixture(scope="module")
def base():
    problem = binary()
    return problem, solve_mfe(problem)


@pytest.fixture(scope="module")
def symmetric():
    problem = binary(mu=0.5, beta=4.0, gamma=0.9, g=(1.0, 1.0))
    return problem, solve_mfe(problem, SMALL)


def test_base_case_accepted(base):
    problem, res = base
    assert res.accepted and res.dist_value <= 1e-8
    assert res.x_star[1] > res.x_star[0]
    assert abs(res.phi - problem.params.beta) <= 1e-6
    assert res.intervals.contains(res.x_star)


def test_validation_report(base):
    problem, res = base
    rep = validate_equilibrium(problem, res)
    assert rep["accepted"] and rep["dist"] <= 1e-8
    assert rep["dist"] == pytest.approx(res.dist_value, abs=1e-12)
    assert rep["phi_gap"] <= 1e-6
    assert rep["bellman_residual"] <= 1e-12
    assert rep["monotone"]
    assert 0 <= rep["tail_mass"] <= 1
    assert rep["boundary_mass"] < 1e-12


def test_corrupted_threshold_is_flagged(base):
    problem, res = base
    for z in range(2):
        x = res.x_star.copy()
        x[z] += 0.5
        rep = validate_point(problem, x, res.V_sw_star, SolverConfig())
        assert rep["dist"] > 1e-8 and not rep["accepted"]


def test_distance_is_payoff_gap_inside_interval():
    # constant payoff: staying is always optimal and the implied value is 1 / (1 - gamma)
    L = 10
    problem = MFEProblem(ModelParams(1.0, 0.5, 2.0), make_resource_process([0], [[0.0]]),
                         SharingFunction.from_table(np.ones((1, L))))
    ev = DistanceContext(problem, SolverConfig(L=L)).evaluate([L - 1], 2.0 - 0.3)
    assert ev.intervals.contains([L - 1])
    assert ev.threshold_gap == 0
    assert ev.dist == pytest.approx(0.3, abs=1e-12)


def test_threshold_term_against_oracle_interval(base):
    problem, res = base
    cfg = SolverConfig()
    ctx = DistanceContext(problem, cfg)
    L = cfg.L
    p, r = problem.params, problem.resource
    x = res.x_star.copy()
    x[0] = res.intervals.upper[0] + 1.0
    ev = _consistent(ctx, x)
    strat = strategy_from_threshold(x, L)
    kappa, _ = solve_kappa(p, r, strat, L, cfg.eps1)
    _, V_st = dense_optimal_stopping(p.lam, p.gamma, r.rates, strat.stay_prob, kappa, L,
                                     problem.sharing.values(L), ev.V_sw)
    eps = cfg.indifference * ctx.scale
    n = np.arange(1, L + 1)
    gap2 = 0.0
    for z in range(2):
        stay = n[V_st[z] > ev.V_sw + eps]
        weak = n[V_st[z] >= ev.V_sw - eps]
        a = min(1 + stay.max(), L - 1) if stay.size else 0
        b = min(1 + weak.max(), L - 1) if weak.size else 0
        gap2 += max(a - x[z], 0, x[z] - b) ** 2
    assert ev.threshold_gap == pytest.approx(math.sqrt(gap2), abs=1e-9)
    assert ev.threshold_gap > 0


def test_symmetric_model_has_equal_thresholds(symmetric):
    problem, res = symmetric
    assert res.accepted
    assert abs(res.x_star[0] - res.x_star[1]) <= 1e-6
    np.testing.assert_array_equal(res.intervals.lower[0], res.intervals.lower[1])
    swapped = validate_point(problem, res.x_star[::-1], res.V_sw_star, SMALL)
    assert swapped["accepted"]


def test_solver_is_deterministic(symmetric):
    problem, res = symmetric
    again = solve_mfe(problem, SMALL)
    np.testing.assert_array_equal(again.x_star, res.x_star)
    assert again.V_sw_star == res.V_sw_star
    assert again.dist_value == res.dist_value


def test_truncation_refinement(symmetric):
    problem, res = symmetric
    fine = solve_mfe(problem, replace(SMALL, L=80))
    upper = problem.sharing.values(1).max() / (1 - problem.params.gamma)
    slack = upper * res.pi_star[:, -1].sum() + 1e-8
    assert abs(fine.V_sw_star - res.V_sw_star) <= slack + 2 * SMALL.eps2 * upper


def test_scale_invariance(base):
    problem, res = base
    scaled = replace(problem, sharing=problem.sharing.scaled(2.0))
    out = solve_mfe(scaled)
    np.testing.assert_allclose(out.x_star, res.x_star, atol=1e-6)
    assert out.V_sw_star == pytest.approx(2 * res.V_sw_star, rel=1e-8)


def test_time_scale_invariance(base):
    problem, res = base
    p = problem.params
    scaled = MFEProblem(replace(p, lam=2 * p.lam), problem.resource.scaled(2.0), problem.sharing)
    out = solve_mfe(scaled)
    np.testing.assert_allclose(out.x_star, res.x_star, atol=1e-6)
    assert out.V_sw_star == pytest.approx(res.V_sw_star, abs=1e-6)


def test_single_payoff_cell_self_consistency():
    table = np.zeros((2, 30))
    table[1, 0] = 1.0
    problem = MFEProblem(ModelParams(1.0, 0.3, 2.0),
                         make_resource_process([0, 1], [[0, 1.0], [0.5, 0]]),
                         SharingFunction.from_table(table))
    cfg = SolverConfig(L=30, k=10)
    res = solve_mfe(problem, cfg)
    rep = validate_point(problem, res.x_star, res.V_sw_star, cfg)
    assert rep["payoff_gap"] <= 1e-8 and rep["threshold_gap"] <= 1e-8
    assert rep["phi_gap"] <= cfg.eps1


def test_not_found_carries_best_point():
    cfg = SolverConfig(L=40, k=1, max_restarts=1, max_refinements=0, max_iter=1, eps2=1e-300)
    with pytest.raises(NotFound) as info:
        solve_mfe(binary(mu=0.5, beta=4.0, gamma=0.9, g=(0.3, 1.0)), cfg)
    assert info.value.result is not None
    assert not info.value.result.accepted


def test_rejects_increasing_sharing():
    problem = MFEProblem(ModelParams(1, 0.9, 2), make_resource_process([0], [[0]]),
                         SharingFunction.from_table([[1.0, 2.0, 3.0]], decreasing=False))
    with pytest.raises(ModelError):
        solve_mfe(problem, SolverConfig(L=3))


@pytest.mark.parametrize("kw", [dict(L=1), dict(k=0), dict(eps0=0), dict(eps2=-1),
                                dict(max_restarts=0), dict(method="x"), dict(search="x")])
def test_solver_config_validation(kw):
    with pytest.raises(ModelError):
        SolverConfig(**kw)


def test_nelder_mead_quadratic():
    target = np.array([0.3, -1.2, 2.5])
    p, val, _ = nelder_mead_minimize(lambda u: float(np.sum((u - target) ** 2)), np.zeros(3),
                                     [(-5, 5)] * 3)
    np.testing.assert_allclose(p, target, atol=1e-6)


def test_nelder_mead_constant():
    start = np.array([0.2, 0.7])
    p, val, _ = nelder_mead_minimize(lambda u: 4.0, start, [(0, 1)] * 2)
    np.testing.assert_array_equal(p, start)
    assert val == 4.0


def test_nelder_mead_flat_valley():
    def f(u):
        clamp = max(0.2 - u[0], 0.0, u[0] - 0.6)
        return abs(u[1] - 0.5) + clamp

    p, val, _ = nelder_mead_minimize(f, np.array([0.9, 0.1]), [(0, 1)] * 2)
    assert 0.2 <= p[0] <= 0.6
    assert abs(p[1] - 0.5) <= 1e-10


def test_nelder_mead_respects_bounds():
    seen = []

    def f(u):
        seen.append(u.copy())
        return float(np.sum((u - 3.0) ** 2))

    p, _, _ = nelder_mead_minimize(f, np.array([0.5, 0.5]), [(0, 1)] * 2)
    assert np.all(np.array(seen) <= 1) and np.all(np.array(seen) >= 0)
    np.testing.assert_allclose(p, [1, 1], atol=1e-8)
