"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import poisson

from nomad_mfe.cli import case_study_L, load_config
from nomad_mfe.ctmc import (build_generator, dominating_tail, solve_kappa, steady_state)
from nomad_mfe.equilibrium import MFEProblem, SolverConfig, solve_mfe
from nomad_mfe.model import (ModelParams, SharingFunction, Strategy, make_resource_process,
                             strategy_from_threshold)
from nomad_mfe.simulate import (simulate_coupled_dominance, simulate_finite_system,
                                simulate_location)
from nomad_mfe.stopping import TaggedChain, switch_value, value_bounds, value_iterate
from nomad_mfe.welfare import case_study, welfare_per_agent, welfare_per_location

from oracles import dense_generator, dense_optimal_stopping, dense_stationary, random_instance

pytestmark = [pytest.mark.slow, pytest.mark.filterwarnings("ignore")]

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# published commission table: commissions, then (DriRev, dDriRev, PlatRev, dPlatRev, AggRev, dAggRev)
TABLE = [
    ((0.15, 0.15), (26.121, None, 4.610, None, 30.731, None)),
    ((0.175, 0.175), (25.353, -2.94, 5.378, 16.66, 30.731, 0.00)),
    ((0.15, 0.20), (25.504, -2.36, 5.219, 13.20, 30.723, -0.02)),
    ((0.20, 0.15), (25.210, -3.49, 5.507, 19.46, 30.718, -0.04)),
    ((0.20, 0.20), (24.584, -5.88, 6.146, 33.32, 30.730, 0.00)),
]


@pytest.fixture
def report(capsys):
    def emit(number, checks, detail=""):
        failed = [name for name, ok in checks if not ok]
        status = "PASS" if not failed else "FAIL"
        line = f"CRITERION {number}: {status}"
        if detail:
            line += f" ({detail})"
        if failed:
            line += " failed: " + "; ".join(failed)
        with capsys.disabled():
            print("\n" + line)
        assert not failed, line
    return emit


def binary(mu, alpha, beta, gamma=0.95):
    return MFEProblem(ModelParams(1.0, gamma, beta),
                      make_resource_process([0, 1], [[0, mu], [mu, 0]]),
                      SharingFunction.power([0.0, 1.0], alpha))


def test_criterion_1_closed_form_anchors(report):
    t0 = time.perf_counter()
    one = make_resource_process([0], [[0.0]])
    checks = []
    kappa = 2.0
    for stay, gamma, mean in ((0.0, 0.95, kappa), (1.0, 0.5, kappa / 0.5)):
        L = 5
        while dominating_tail(mean, L) >= 1e-12:
            L += 1
        p = ModelParams(1.0, gamma, 1.0)
        pi = steady_state(build_generator(p, one, Strategy.constant(1, L, stay), kappa, L)).pi
        exact = poisson.pmf(np.arange(L), mean)
        exact /= exact.sum()
        err = np.abs(pi[0] - exact).max()
        checks.append((f"Poisson stay={stay} err={err:.2e}", err <= 1e-9))
    p = ModelParams(1.0, 0.95, 20.0)
    eps1 = 1e-6
    for stay, expect in ((0.0, 20.0), (1.0, 20.0 * 0.05)):
        k, _ = solve_kappa(p, one, Strategy.constant(1, 120, stay), 120, eps1)
        checks.append((f"kappa stay={stay} got {k}", abs(k - expect) <= eps1))
    elapsed = time.perf_counter() - t0
    checks.append((f"runtime {elapsed:.2f}s", elapsed < 1.0))
    report(1, checks, f"{elapsed:.2f}s")


def test_criterion_2_oracle_equivalence(report):
    t0 = time.perf_counter()
    eps0 = 1e-4
    worst_pi = worst_v = 0.0
    n = 60
    for seed in range(n):
        inst = random_instance(np.random.default_rng(10_000 + seed))
        p = ModelParams(inst["lam"], inst["gamma"], 1.0)
        r = make_resource_process(range(inst["nz"]), inst["rates"])
        strat = Strategy(inst["stay"])
        L = inst["L"]
        pi = steady_state(build_generator(p, r, strat, inst["kappa"], L)).pi.ravel()
        Q = dense_generator(inst["lam"], inst["gamma"], inst["rates"], inst["stay"],
                            inst["kappa"], L)
        worst_pi = max(worst_pi, np.abs(pi - dense_stationary(Q)).max())
        F = SharingFunction.power(inst["g"], inst["alpha"])
        vf = value_iterate(p, r, F, strat, inst["kappa"], inst["V_sw"], L, eps0=eps0)
        V, V_st = dense_optimal_stopping(inst["lam"], inst["gamma"], inst["rates"], inst["stay"],
                                         inst["kappa"], L, inst["F"], inst["V_sw"])
        scale = F.values(L).max()
        worst_v = max(worst_v, np.abs(vf.V_st - V_st).max() / scale,
                      np.abs(vf.V - V).max() / scale)
    elapsed = time.perf_counter() - t0
    report(2, [(f"stationary err {worst_pi:.2e}", worst_pi <= 1e-9),
               (f"value err {worst_v:.2e} x ||F||", worst_v <= 3 * eps0),
               (f"runtime {elapsed:.1f}s", elapsed < 30)],
           f"{n} instances, pi err {worst_pi:.1e}, V err {worst_v:.1e}, {elapsed:.1f}s")


def _random_setup(rng, L=30):
    p = ModelParams(float(rng.uniform(0.5, 2)), float(rng.uniform(0.5, 0.95)),
                    float(rng.uniform(1, 5)))
    r = make_resource_process([0, 1], [[0, rng.uniform(0.1, 2)], [rng.uniform(0.1, 2), 0]])
    F = SharingFunction.power([float(rng.uniform(0, 1)), 1.0], float(rng.uniform(0.3, 2)))
    strat = strategy_from_threshold(rng.uniform(0, L - 1, 2), L)
    return p, r, F, strat


def test_criterion_3_property_suites(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    rows = phi_mono = v_mono = contraction = bounds = True
    L = 30
    for _ in range(30):
        p, r, F, strat = _random_setup(rng)
        stay = rng.uniform(0, 1, (2, L + 1))
        stay[:, 0] = 1
        Q = build_generator(p, r, Strategy(stay), float(rng.uniform(0.1, 5)), L).Q
        rows &= bool(np.abs(np.asarray(Q.sum(axis=1))).max() <= 1e-10)
        phis = [steady_state(build_generator(p, r, strat, k, L)).phi
                for k in np.linspace(0.1, 4.0, 20)]
        phi_mono &= bool(np.all(np.diff(phis) > 0))
        kappa, sol = solve_kappa(p, r, strat, L, 1e-8)
        chain = TaggedChain(p, r, F, strat, kappa, L)
        lower, upper = value_bounds(p, r, F, L)
        V_sw = float(rng.uniform(0, upper))
        vf = value_iterate(p, r, F, strat, kappa, V_sw, L, eps0=1e-8, chain=chain)
        v_mono &= bool(np.all(np.diff(vf.V_st, axis=1) <= 1e-10))
        U1, U2 = rng.uniform(0, 10, (2, 2, L))
        d = np.abs(chain.sweep(U1, V_sw)[1] - chain.sweep(U2, V_sw)[1]).max()
        contraction &= bool(d <= (p.gamma + 1e-12) * np.abs(U1 - U2).max())
        tail = dominating_tail(p.beta / (1 - p.gamma), L)
        implied = switch_value(sol, vf)
        bounds &= bool(lower * (1 - tail) <= implied <= upper)

    base = MFEProblem(ModelParams(1.0, 0.9, 4.0),
                      make_resource_process([0, 1], [[0, 0.5], [0.5, 0]]),
                      SharingFunction.power([0.3, 1.0], 1.0))
    cfg = SolverConfig(L=40, k=10)
    res = solve_mfe(base, cfg)
    scaled = solve_mfe(replace(base, sharing=base.sharing.scaled(2.0)), cfg)
    timed = solve_mfe(MFEProblem(replace(base.params, lam=2.0), base.resource.scaled(2.0),
                                 base.sharing), cfg)
    scale_ok = (np.abs(scaled.x_star - res.x_star).max() <= 1e-6
                and abs(scaled.V_sw_star - 2 * res.V_sw_star) <= 1e-8 * abs(res.V_sw_star) * 2)
    time_ok = (np.abs(timed.x_star - res.x_star).max() <= 1e-6
               and abs(timed.V_sw_star - res.V_sw_star) <= 1e-6)
    elapsed = time.perf_counter() - t0
    report(3, [("generator row sums", rows), ("phi monotone in kappa", phi_mono),
               ("V_st monotone in n", v_mono), ("contraction", contraction),
               ("switch value bounds", bounds), ("payoff scale invariance", scale_ok),
               ("time scale invariance", time_ok), (f"runtime {elapsed:.1f}s", elapsed < 120)],
           f"{elapsed:.1f}s")


def test_criterion_4_qualitative_sweeps(report):
    t0 = time.perf_counter()
    cfg = SolverConfig()
    alphas = (0.5, 1.0, 1.5)
    out = {}
    for alpha in alphas:
        for mu, beta in ((0.25, 20.0), (1.0, 20.0), (4.0, 20.0), (0.25, 10.0), (0.25, 40.0)):
            prob = binary(mu, alpha, beta)
            res = solve_mfe(prob, cfg)
            W_L = welfare_per_location(res.pi_star, prob.sharing, 1.0)
            out[alpha, mu, beta] = (res.x_star[1] - res.x_star[0], W_L,
                                    welfare_per_agent(W_L, beta), res)
    checks = []
    for alpha in alphas:
        gaps = [out[alpha, mu, 20.0][0] for mu in (0.25, 1.0, 4.0)]
        checks.append((f"gap decreasing in mu, alpha={alpha}: {np.round(gaps, 3)}",
                       gaps[0] > gaps[1] > gaps[2]))
        W = [out[alpha, mu, 20.0][1] for mu in (0.25, 1.0, 4.0)]
        if alpha == 0.5:
            checks.append((f"W_L decreasing in mu, alpha=0.5: {W}", W[0] > W[1] > W[2]))
        elif alpha == 1.5:
            checks.append((f"W_L increasing in mu, alpha=1.5: {W}", W[0] < W[1] < W[2]))
        else:
            spread = (max(W) - min(W)) / min(W)
            checks.append((f"W_L spread {spread:.2%} for alpha=1", spread <= 0.01))
        gaps = [out[alpha, 0.25, b][0] for b in (10.0, 20.0, 40.0)]
        checks.append((f"gap increasing in beta, alpha={alpha}: {np.round(gaps, 3)}",
                       gaps[0] < gaps[1] < gaps[2]))
        WA = [out[alpha, 0.25, b][2] for b in (10.0, 20.0, 40.0)]
        checks.append((f"W_A decreasing in beta, alpha={alpha}: {WA}", WA[0] > WA[1] > WA[2]))
    results = [v[3] for v in out.values()]
    worst = max(r.dist_value for r in results)
    checks.append(("all accepted", all(r.accepted for r in results)))
    checks.append((f"max dist {worst:.1e}", worst <= 1e-8))
    elapsed = time.perf_counter() - t0
    checks.append((f"runtime {elapsed:.0f}s", elapsed < 900))
    report(4, checks, f"{len(results)} solves, max dist {worst:.1e}, {elapsed:.0f}s")


def _sign(value):
    # a tabulated 0.00% means |delta| < 0.005%
    return 0 if abs(value) < 0.005 else (1 if value > 0 else -1)


def test_criterion_5_commission_table(report):
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "casestudy.toml")
    cs = cfg.casestudy
    solver = replace(cfg.solver, L=case_study_L(cfg.params, cs["max_L"]))
    rows = case_study(cfg.params, cfg.resource, cs["f"], cs["alpha"],
                      [c for c, _ in TABLE], cs["n_locations"], solver)
    checks = []
    for row, (c, ref) in zip(rows, TABLE):
        got = (row.DriRev, row.dDriRev, row.PlatRev, row.dPlatRev, row.AggRev, row.dAggRev)
        for name, i in (("DriRev", 0), ("PlatRev", 2), ("AggRev", 4)):
            rel = (got[i] - ref[i]) / ref[i]
            checks.append((f"{c} {name} {got[i]:.3f} vs {ref[i]} ({rel:+.2%})",
                           abs(rel) <= 0.015))
        for name, i in (("dDriRev", 1), ("dPlatRev", 3), ("dAggRev", 5)):
            if ref[i] is not None:
                checks.append((f"{c} {name} sign {got[i]:+.4f}% vs {ref[i]:+.2f}%",
                               _sign(got[i]) == _sign(ref[i])))
        checks.append((f"{c} accepted", row.accepted))
    elapsed = time.perf_counter() - t0
    checks.append((f"runtime {elapsed:.0f}s", elapsed < 600))
    base = rows[0]
    report(5, checks, f"base ({base.DriRev:.3f}, {base.PlatRev:.3f}, {base.AggRev:.3f}), "
                      f"{elapsed:.0f}s")


def test_criterion_6_simulation_consistency(report):
    t0 = time.perf_counter()
    problem = binary(0.25, 1.0, 20.0)
    cfg = SolverConfig()
    res = solve_mfe(problem, cfg)
    p, r = problem.params, problem.resource
    strat = strategy_from_threshold(res.x_star, cfg.L)
    st = simulate_location(p, r, strat, res.kappa_star, 1e9, seed=1, max_events=10**6,
                           warmup=100.0)
    tv = 0.5 * float(np.abs(st.distribution - res.pi_star).sum())
    sandwich = all(simulate_coupled_dominance(p, r, strat, res.kappa_star, 50.0, seed=s).holds
                   for s in range(200))
    fs = simulate_finite_system(50, p, r, strat, 1500.0, seed=1, sharing=problem.sharing)
    occ_ok = abs(fs.mean_occupancy - p.beta) <= 3 * fs.occupancy_halfwidth
    pay_rel = (fs.payoff_mean - res.V_sw_star) / res.V_sw_star
    elapsed = time.perf_counter() - t0
    report(6, [(f"TV {tv:.4f} at {st.events} events", tv <= 0.02 and st.events == 10**6),
               ("coupling sandwich on 200 seeds", sandwich),
               (f"finite occupancy {fs.mean_occupancy:.3f} +- {fs.occupancy_halfwidth:.3f}",
                occ_ok),
               (f"finite payoff {fs.payoff_mean:.4f} vs {res.V_sw_star:.4f} ({pay_rel:+.2%})",
                abs(pay_rel) <= 0.05),
               ("finite system conserves agents", fs.conserved),
               (f"runtime {elapsed:.0f}s", elapsed < 600)],
           f"TV {tv:.4f}, payoff {pay_rel:+.2%}, {elapsed:.0f}s")
