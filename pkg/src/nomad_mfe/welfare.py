"""Welfare metrics, parameter sweeps and the commission case study."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from typing import Sequence

import numpy as np

from .equilibrium import EquilibriumResult, MFEProblem, SolverConfig, solve_mfe
from .errors import MFEError, ModelError, NotFound
from .model import ModelParams, SharingFunction, make_resource_process

log = logging.getLogger(__name__)

REVENUE_UNIT = 1e5
SWEEP_PARAMETERS = ("mu", "beta", "gamma", "lambda", "alpha")


def _occupied_payoff(pi, F: SharingFunction) -> np.ndarray:
    """F(z, n) aligned with pi[z, n]; zero in the n = 0 column."""
    L = pi.shape[1]
    return np.hstack([np.zeros((pi.shape[0], 1)), F.values(L - 1)])


def welfare_per_location(pi, F: SharingFunction, lam: float) -> float:
    """Stationary payoff rate of a location, sum of lam * n * F(z, n) * pi(z, n)."""
    pi = np.asarray(pi, dtype=float)
    n = np.arange(pi.shape[1])
    return float(lam * np.sum(n * _occupied_payoff(pi, F) * pi))


def welfare_per_agent(W_L: float, beta: float) -> float:
    if not beta > 0:
        raise ModelError(f"beta must be > 0, got {beta}")
    return W_L / beta


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: float
    x: tuple
    V_sw: float
    kappa: float
    W_L: float
    W_A: float
    dist: float
    accepted: bool
    runtime: float
    error: str | None = None


def with_parameter(problem: MFEProblem, parameter: str, value: float) -> MFEProblem:
    """Copy of ``problem`` with one named parameter replaced.

    ``mu`` sets every off-diagonal resource rate; ``alpha`` needs a power
    sharing function.
    """
    p, r, F = problem.params, problem.resource, problem.sharing
    if parameter == "mu":
        rates = np.full((r.size, r.size), float(value))
        return replace(problem, resource=make_resource_process(r.states, rates))
    if parameter == "beta":
        return replace(problem, params=replace(p, beta=float(value)))
    if parameter == "gamma":
        return replace(problem, params=replace(p, gamma=float(value)))
    if parameter == "lambda":
        return replace(problem, params=replace(p, lam=float(value)))
    if parameter == "alpha":
        if F.kind != "power":
            raise ModelError("alpha can only be swept for a power sharing function")
        return replace(problem, sharing=SharingFunction.power(F.level_payoff, float(value)))
    raise ModelError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")


def _row(parameter, value, problem, res: EquilibriumResult, runtime, error=None) -> SweepRow:
    W_L = welfare_per_location(res.pi_star, problem.sharing, problem.params.lam)
    return SweepRow(parameter, float(value), tuple(float(v) for v in res.x_star),
                    res.V_sw_star, res.kappa_star, W_L,
                    welfare_per_agent(W_L, problem.params.beta), res.dist_value,
                    res.accepted, runtime, error)


def _sweep_one(problem, solver, parameter, value) -> SweepRow:
    t0 = time.perf_counter()
    try:
        prob = with_parameter(problem, parameter, value)
    except ModelError as exc:
        return _failed(parameter, value, problem, t0, f"{type(exc).__name__}: {exc}")
    try:
        res = solve_mfe(prob, solver)
    except NotFound as exc:
        if exc.result is None:
            return _failed(parameter, value, prob, t0, str(exc))
        return _row(parameter, value, prob, exc.result, time.perf_counter() - t0, str(exc))
    except MFEError as exc:
        return _failed(parameter, value, prob, t0, f"{type(exc).__name__}: {exc}")
    return _row(parameter, value, prob, res, time.perf_counter() - t0)


def _failed(parameter, value, problem, t0, message) -> SweepRow:
    log.warning("sweep %s=%g failed: %s", parameter, value, message)
    nan = math.nan
    x = (nan,) * problem.resource.size
    return SweepRow(parameter, float(value), x, nan, nan, nan, nan, nan, False,
                    time.perf_counter() - t0, message)


def sweep(problem: MFEProblem, parameter: str, values: Sequence[float],
          solver: SolverConfig | None = None, workers: int = 1) -> list[SweepRow]:
    """One fresh equilibrium solve per value; rows come back in input order.

    A failing value yields a row with ``accepted=False`` and ``error`` set.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ModelError(f"unknown sweep parameter {parameter!r}; "
                         f"expected one of {SWEEP_PARAMETERS}")
    solver = solver or SolverConfig()
    if workers <= 1 or len(values) <= 1:
        return [_sweep_one(problem, solver, parameter, v) for v in values]
    # solves are GIL-bound, so rows fan out to worker processes
    with ProcessPoolExecutor(max_workers=min(workers, len(values))) as pool:
        return list(pool.map(partial(_sweep_one, problem, solver, parameter), values))


@dataclass(frozen=True)
class CaseStudyRow:
    """Revenue rates in units of ``REVENUE_UNIT`` dollars per hour; deltas in percent."""

    c: tuple
    DriRev: float
    PlatRev: float
    AggRev: float
    dDriRev: float | None = None
    dPlatRev: float | None = None
    dAggRev: float | None = None
    x: tuple = ()
    V_sw: float = math.nan
    dist: float = math.nan
    accepted: bool = True


def case_study_revenues(pi_star, f, c, alpha: float, n_locations: int,
                        unit: float = REVENUE_UNIT) -> CaseStudyRow:
    """Rider-payment rates across all locations, split between drivers and the platform.

    A location in state z with n >= 1 drivers collects riders' payments at
    rate ``f(z) * n**(1 - alpha)``, split ``1 - c(z)`` to drivers and
    ``c(z)`` to the platform.
    """
    pi = np.asarray(pi_star, dtype=float)
    f = np.asarray(f, dtype=float)
    c = np.asarray(c, dtype=float)
    n = np.arange(pi.shape[1], dtype=float)
    gross = np.zeros_like(pi)
    gross[:, 1:] = f[:, None] * n[None, 1:] ** (1.0 - alpha)
    per_state = n_locations * np.sum(gross * pi, axis=1) / unit
    dri = float(np.sum((1.0 - c) * per_state))
    plat = float(np.sum(c * per_state))
    return CaseStudyRow(tuple(float(v) for v in c), dri, plat, dri + plat)


def case_study_problem(params: ModelParams, resource, f, c, alpha: float) -> MFEProblem:
    """Driver payoff per epoch ``(1 - c(z)) f(z) / n**alpha``."""
    g = (1.0 - np.asarray(c, dtype=float)) * np.asarray(f, dtype=float)
    return MFEProblem(params, resource, SharingFunction.power(g, alpha))


def _pct(new, base):
    return 100.0 * (new - base) / base if base != 0 else math.nan


def case_study(params: ModelParams, resource, f, alpha: float, commissions,
               n_locations: int, solver: SolverConfig | None = None,
               unit: float = REVENUE_UNIT) -> list[CaseStudyRow]:
    """Equilibrium revenues per commission scenario; deltas are against the first."""
    solver = solver or SolverConfig()
    rows = []
    for c in commissions:
        problem = case_study_problem(params, resource, f, c, alpha)
        try:
            res = solve_mfe(problem, solver)
        except NotFound as exc:
            if exc.result is None:
                raise
            log.warning("commission %s: %s", tuple(c), exc)
            res = exc.result
        row = case_study_revenues(res.pi_star, f, c, alpha, n_locations, unit)
        rows.append(replace(row, x=tuple(float(v) for v in res.x_star), V_sw=res.V_sw_star,
                            dist=res.dist_value, accepted=res.accepted))
    base = rows[0]
    out = [base]
    for row in rows[1:]:
        out.append(replace(row, dDriRev=_pct(row.DriRev, base.DriRev),
                           dPlatRev=_pct(row.PlatRev, base.PlatRev),
                           dAggRev=_pct(row.AggRev, base.AggRev)))
    return out
