"""Fixed-point search for threshold mean field equilibria.

The residual ``dist(x, V_sw)`` is zero exactly when the threshold strategy
``x`` is an approximate best response to ``V_sw`` and the switching payoff it
induces through the stationary law equals ``V_sw``. It is minimized by
Nelder-Mead from a screened grid of starts.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .ctmc import StationarySolution, check_truncation, solve_kappa
from .errors import DegenerateLowerBound, MFEError, ModelError, MonotonicityViolation, NotFound
from .model import ModelParams, ResourceProcess, SharingFunction, strategy_from_threshold
from .stopping import (TaggedChain, ThresholdIntervals, ValueFunctions, check_monotone,
                       optimal_threshold_set, switch_value, value_bounds)

log = logging.getLogger(__name__)

LOWER_BOUND_FALLBACK = 1e-12
SCREEN_TOLERANCE_FACTOR = 10.0


@dataclass(frozen=True)
class MFEProblem:
    params: ModelParams
    resource: ResourceProcess
    sharing: SharingFunction

    def __post_init__(self):
        if self.sharing.n_states != self.resource.size:
            raise ModelError(f"sharing function has {self.sharing.n_states} states, "
                             f"resource process has {self.resource.size}")


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings.

    ``eps0`` and ``eps`` are in units of ``||F||_inf``; so is the payoff term
    of ``dist``. ``eps`` defaults to ``2 * eps0``.
    """

    L: int = 200
    k: int = 20
    eps0: float = 1e-4
    eps1: float = 1e-6
    eps2: float = 1e-8
    eps: float | None = None
    max_restarts: int = 64
    max_refinements: int = 3
    max_iter: int = 2000
    stop_at_first: bool = True
    search: str = "profiled"
    method: str = "value"

    def __post_init__(self):
        if self.L < 2:
            raise ModelError(f"L must be >= 2, got {self.L}")
        if self.k < 1:
            raise ModelError(f"k must be >= 1, got {self.k}")
        for name in ("eps0", "eps1", "eps2"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be > 0")
        if self.max_restarts < 1:
            raise ModelError("max_restarts must be >= 1")
        if self.max_refinements < 0:
            raise ModelError("max_refinements must be >= 0")
        if self.method not in ("value", "policy"):
            raise ModelError(f"method must be 'value' or 'policy', got {self.method!r}")
        if self.search not in ("profiled", "joint"):
            raise ModelError(f"search must be 'profiled' or 'joint', got {self.search!r}")

    @property
    def indifference(self) -> float:
        return 2.0 * self.eps0 if self.eps is None else self.eps


@dataclass(frozen=True)
class Evaluation:
    x: np.ndarray
    V_sw: float
    dist: float
    payoff_gap: float
    threshold_gap: float
    kappa: float
    solution: StationarySolution
    value_functions: ValueFunctions
    intervals: ThresholdIntervals
    implied_V_sw: float


@dataclass(frozen=True)
class EquilibriumResult:
    x_star: np.ndarray
    V_sw_star: float
    kappa_star: float
    pi_star: np.ndarray
    value_functions: ValueFunctions = field(repr=False)
    dist_value: float
    restarts_used: int
    accepted: bool
    intervals: ThresholdIntervals | None = None
    k_used: int = 0
    evaluations: int = 0
    runtime: float = 0.0

    @property
    def phi(self) -> float:
        return float(self.pi_star.sum(axis=0) @ np.arange(self.pi_star.shape[1]))


class DistanceContext:
    """Evaluates dist(x, V_sw), caching the x-dependent part of the pipeline."""

    def __init__(self, problem: MFEProblem, config: SolverConfig, cache_size: int = 256):
        self.problem = problem
        self.config = config
        L = config.L
        p, r, F = problem.params, problem.resource, problem.sharing
        self.scale = float(F.values(L).max())
        try:
            self.lower, self.upper = value_bounds(p, r, F, L)
        except DegenerateLowerBound:
            self.lower = LOWER_BOUND_FALLBACK
            self.upper = float(F.values(L).max()) / (1.0 - p.gamma)
            log.info("lower payoff bound underflows; using %g", self.lower)
        self.tail = check_truncation(p.beta, p.gamma, L)
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self.evaluations = 0

    @property
    def n_states(self) -> int:
        return self.problem.resource.size

    def chain(self, x):
        """(kappa, stationary solution, tagged chain) for thresholds ``x``."""
        key = tuple(float(v) for v in x)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        p, r, F = self.problem.params, self.problem.resource, self.problem.sharing
        L = self.config.L
        strat = strategy_from_threshold(np.array(key), L)
        kappa, sol = solve_kappa(p, r, strat, L, self.config.eps1)
        item = (kappa, sol, TaggedChain(p, r, F, strat, kappa, L))
        self._cache[key] = item
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return item

    def value_functions(self, chain: TaggedChain, V_sw: float) -> ValueFunctions:
        if self.config.method == "policy":
            V_st, steps = chain.policy_iterate(V_sw, warm=True)
            return ValueFunctions(chain._bellman(V_st, V_sw), V_st, 0, 0.0, steps)
        V, V_st, it, delta = chain.value_iterate(V_sw, self.config.eps0)
        V_st, steps = chain.polish(V_st, V_sw)
        return ValueFunctions(chain._bellman(V_st, V_sw), V_st, it, delta, steps)

    def implied_switch_value(self, x, V_sw: float) -> float:
        _, sol, chain = self.chain(x)
        return switch_value(sol, self.value_functions(chain, V_sw))

    def evaluate(self, x, V_sw: float) -> Evaluation:
        x = np.asarray(x, dtype=float)
        kappa, sol, chain = self.chain(x)
        vf = self.value_functions(chain, float(V_sw))
        self.evaluations += 1
        implied = switch_value(sol, vf)
        iv = optimal_threshold_set(vf, V_sw, self.config.indifference * self.scale)
        pay = abs(V_sw - implied) / self.scale
        thr = iv.distance(x)
        return Evaluation(x, float(V_sw), pay + thr, pay, thr, kappa, sol, vf, iv, implied)

    def __call__(self, x, V_sw: float) -> float:
        return self.evaluate(x, V_sw).dist

    def screen(self, x, V_grid):
        """Cheap ranking of thresholds ``x`` for the multi-start.

        Value iteration runs once for every V_sw in ``V_grid`` (looser
        tolerance, no polish). The payoff-consistent V_sw is interpolated
        between the two grid nodes where the payoff gap changes sign, and the
        score is the threshold gap there. Returns ``(score, V_sw)``.
        """
        x = np.asarray(x, dtype=float)
        _, sol, chain = self.chain(x)
        V_grid = np.asarray(V_grid, dtype=float)
        if self.config.method == "policy":
            V_st = np.stack([chain.policy_iterate(v, warm=True)[0] for v in V_grid], axis=-1)
        else:
            _, V_st, _, _ = chain.value_iterate(V_grid,
                                                SCREEN_TOLERANCE_FACTOR * self.config.eps0)
        self.evaluations += V_grid.size
        gap = np.einsum("zn,znj->j", sol.pi, V_st) - V_grid
        down = np.nonzero((gap[:-1] >= 0) & (gap[1:] < 0))[0]
        if down.size:
            j = int(down[0])
            t = gap[j] / (gap[j] - gap[j + 1])
            V = (1 - t) * V_grid[j] + t * V_grid[j + 1]
            cont = (1 - t) * V_st[..., j] + t * V_st[..., j + 1]
        else:
            j = V_grid.size - 1 if gap[-1] >= 0 else 0
            V, cont = V_grid[j], V_st[..., j]
        vf = ValueFunctions(cont, cont, 0, 0.0)
        try:
            iv = optimal_threshold_set(vf, V, self.config.indifference * self.scale)
        except MonotonicityViolation:
            return math.inf, float(V)
        return iv.distance(x), float(V)


def nelder_mead_minimize(objective, start, bounds, *, step=None, max_iter: int = 2000,
                         xatol: float = 1e-10, fatol: float = 1e-12):
    """Box-constrained Nelder-Mead; returns ``(point, value, iterations)``.

    Trial points are clamped to ``bounds`` before evaluation. Stops when the
    simplex diameter drops below ``xatol`` or the spread of vertex values
    below ``fatol``, or after ``max_iter`` iterations.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in zip(*bounds))
    x0 = np.clip(np.asarray(start, dtype=float), lo, hi)
    d = x0.size
    width = hi - lo
    if step is None:
        step = 0.05 * width
    step = np.broadcast_to(np.asarray(step, dtype=float), (d,))

    def f(p):
        p = np.clip(p, lo, hi)
        return float(objective(p)), p

    v0, x0 = f(x0)
    simplex = [x0]
    values = [v0]
    for i in range(d):
        p = x0.copy()
        # step toward the roomier side so the vertex stays distinct after clamping
        p[i] += step[i] if hi[i] - x0[i] >= x0[i] - lo[i] else -step[i]
        v, p = f(p)
        simplex.append(p)
        values.append(v)
    simplex = np.array(simplex)
    values = np.array(values)

    it = 0
    for it in range(1, max_iter + 1):
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        diam = max(np.abs(simplex[1:] - simplex[0]).max(), 0.0)
        if diam < xatol or values[-1] - values[0] < fatol:
            break
        centroid = simplex[:-1].mean(axis=0)
        vr, xr = f(centroid + (centroid - simplex[-1]))
        if vr < values[0]:
            ve, xe = f(centroid + 2.0 * (centroid - simplex[-1]))
            simplex[-1], values[-1] = (xe, ve) if ve < vr else (xr, vr)
            continue
        if vr < values[-2]:
            simplex[-1], values[-1] = xr, vr
            continue
        if vr < values[-1]:
            vc, xc = f(centroid + 0.5 * (xr - centroid))
            if vc <= vr:
                simplex[-1], values[-1] = xc, vc
                continue
        else:
            vc, xc = f(centroid + 0.5 * (simplex[-1] - centroid))
            if vc < values[-1]:
                simplex[-1], values[-1] = xc, vc
                continue
        for i in range(1, d + 1):
            values[i], simplex[i] = f(simplex[0] + 0.5 * (simplex[i] - simplex[0]))
    best = int(np.argmin(values))
    return simplex[best].copy(), float(values[best]), it


class _Scaled:
    """Map between (x, V_sw) and the unit cube used by the simplex search."""

    def __init__(self, ctx: DistanceContext):
        self.ctx = ctx
        self.top = ctx.config.L - 1
        self.span = ctx.upper - ctx.lower

    def unpack(self, u):
        return u[:-1] * self.top, self.ctx.lower + u[-1] * self.span

    def pack(self, x, V_sw):
        return np.append(np.asarray(x, dtype=float) / self.top,
                         (V_sw - self.ctx.lower) / self.span)

    def __call__(self, u):
        x, v = self.unpack(u)
        try:
            return self.ctx(x, v)
        except MonotonicityViolation:
            return math.inf


def _grid(ctx: DistanceContext, k: int):
    top = ctx.config.L - 1
    xs = np.linspace(0.0, top, k + 1)
    vs = np.linspace(ctx.lower, ctx.upper, k + 1)
    return xs, vs


def _screen(ctx: DistanceContext, k: int):
    """Grid starts ``(score, index, x, V_sw)`` ranked by score, then index."""
    xs, vs = _grid(ctx, k)
    starts = []
    for idx in itertools.product(range(k + 1), repeat=ctx.n_states):
        x = xs[list(idx)]
        try:
            score, v = ctx.screen(x, vs)
        except MFEError as exc:
            log.debug("screening failed at x=%s: %s", x, exc)
            continue
        starts.append((score, idx, x, v))
    starts.sort(key=lambda s: (s[0], s[1]))
    return starts


def _root_in_payoff(ctx: DistanceContext, x) -> float | None:
    """V_sw solving V_sw = implied switch value at fixed thresholds ``x``.

    The implied value has slope at most gamma in V_sw, so the gap is strictly
    decreasing and changes sign on [lower, upper].
    """
    g = lambda v: ctx.implied_switch_value(x, v) - v
    lo, hi = ctx.lower, ctx.upper
    try:
        g_lo, g_hi = g(lo), g(hi)
        if g_lo <= 0:
            return lo
        if g_hi >= 0:
            return hi
        return brentq(g, lo, hi, xtol=1e-15 * max(1.0, hi), rtol=4 * np.finfo(float).eps,
                      maxiter=200)
    except (MFEError, ValueError, RuntimeError):
        return None


def _consistent(ctx: DistanceContext, x):
    """Evaluation at ``x`` with V_sw set to the payoff-consistent value."""
    v = _root_in_payoff(ctx, x)
    if v is None:
        return None
    try:
        return ctx.evaluate(x, v)
    except MFEError:
        return None


class _Profiled:
    """dist over scaled thresholds with V_sw solved out exactly."""

    def __init__(self, ctx: DistanceContext):
        self.ctx = ctx
        self.top = ctx.config.L - 1

    def __call__(self, u):
        ev = _consistent(self.ctx, u * self.top)
        return math.inf if ev is None else ev.dist


def _refine(ctx: DistanceContext, x0, v0, k: int):
    """Local search from grid start ``(x0, v0)``; returns ``(dist, x, V_sw)``."""
    cfg = ctx.config
    inset = 0.25 / k
    top = cfg.L - 1
    n = x0.size
    best = (math.inf, x0, v0)
    if cfg.search == "joint":
        scaled = _Scaled(ctx)
        u0 = np.clip(scaled.pack(x0, v0), inset, 1.0 - inset)
        u, val, _ = nelder_mead_minimize(scaled, u0, [(0.0, 1.0)] * (n + 1),
                                         step=np.full(n + 1, 0.5 / k), max_iter=cfg.max_iter)
        x, v = scaled.unpack(u)
        best = (val, x, v)
        if val <= cfg.eps2:
            return best
        x0 = x
    u0 = np.clip(x0 / top, inset, 1.0 - inset)
    u, val, _ = nelder_mead_minimize(_Profiled(ctx), u0, [(0.0, 1.0)] * n,
                                     step=np.full(n, 0.5 / k), max_iter=cfg.max_iter)
    if val < best[0]:
        ev = _consistent(ctx, u * top)
        if ev is not None:
            best = (ev.dist, ev.x, ev.V_sw)
    return best


def _epoch_units(problem: MFEProblem) -> MFEProblem:
    """Same problem with time measured in mean agent inter-epoch times (lambda = 1).

    Equilibria depend on rates only through their ratios to lambda, so the
    search runs in these units and results are exactly time-scale invariant.
    """
    lam = problem.params.lam
    if lam == 1.0:
        return problem
    return replace(problem, params=replace(problem.params, lam=1.0),
                   resource=problem.resource.scaled(1.0 / lam))


def _result(ctx: DistanceContext, x, V_sw, restarts, k, t0, lam=1.0) -> EquilibriumResult:
    ev = ctx.evaluate(x, V_sw)
    return EquilibriumResult(
        x_star=np.array(ev.x), V_sw_star=ev.V_sw, kappa_star=ev.kappa * lam,
        pi_star=ev.solution.pi, value_functions=ev.value_functions, dist_value=ev.dist,
        restarts_used=restarts, accepted=ev.dist <= ctx.config.eps2, intervals=ev.intervals,
        k_used=k, evaluations=ctx.evaluations, runtime=time.perf_counter() - t0)


def solve_mfe(problem: MFEProblem, config: SolverConfig | None = None) -> EquilibriumResult:
    """Multi-start search for an approximate equilibrium.

    Raises ``NotFound`` (carrying the best result) when no refinement round
    reaches ``dist <= eps2``.
    """
    config = config or SolverConfig()
    if not problem.sharing.decreasing:
        raise ModelError("equilibrium search needs a sharing function non-increasing in n")
    lam = problem.params.lam
    ctx = DistanceContext(_epoch_units(problem), config)
    t0 = time.perf_counter()
    best = None  # (value, x tuple, V_sw)
    restarts = 0
    k = config.k
    for round_ in range(config.max_refinements + 1):
        starts = _screen(ctx, k)[:config.max_restarts]
        log.info("k=%d: best screened start %s", k,
                 (starts[0][2].tolist(), starts[0][3]) if starts else None)
        found = []
        for _, _, x0, v0 in starts:
            restarts += 1
            val, x, v = _refine(ctx, x0, v0, k)
            cand = (val, tuple(float(c) for c in x), float(v))
            log.debug("restart %d: dist=%.3g x=%s V_sw=%.10g", restarts, *cand)
            if best is None or cand < best:
                best = cand
            if val <= config.eps2:
                found.append(cand)
                if config.stop_at_first:
                    break
        if found:
            val, x, v = min(found)
            log.info("accepted dist=%.3g at x=%s V_sw=%.10g after %d restarts", val, x, v,
                     restarts)
            return _result(ctx, np.array(x), v, restarts, k, t0, lam)
        if round_ < config.max_refinements:
            k *= 2
            log.info("no start reached eps2=%g; refining grid to k=%d", config.eps2, k)
    if best is None:
        raise NotFound("every start failed to evaluate")
    res = _result(ctx, np.array(best[1]), best[2], restarts, k, t0, lam)
    raise NotFound(f"best dist {res.dist_value:.3g} exceeds eps2={config.eps2:g}", result=res)


def validate_equilibrium(problem: MFEProblem, result: EquilibriumResult,
                         config: SolverConfig | None = None, eps2: float | None = None) -> dict:
    """Recompute the full pipeline at (x*, V_sw*) from scratch and report residuals."""
    config = config or SolverConfig(L=result.pi_star.shape[1])
    return validate_point(problem, result.x_star, result.V_sw_star, config, eps2)


def validate_point(problem: MFEProblem, x, V_sw: float, config: SolverConfig,
                   eps2: float | None = None) -> dict:
    """Residual report for the candidate ``(x, V_sw)``."""
    eps2 = config.eps2 if eps2 is None else eps2
    ctx = DistanceContext(_epoch_units(problem), config)
    ev = ctx.evaluate(np.asarray(x, dtype=float), float(V_sw))
    vf = ev.value_functions
    F = problem.sharing.values(config.L)
    g = problem.params.gamma
    bellman = float(np.abs(vf.V - (F + g * np.maximum(vf.V_st, ev.V_sw))).max())
    try:
        check_monotone(vf.V_st, 1e-8 * max(1.0, float(np.abs(vf.V_st).max())))
        monotone = True
    except MonotonicityViolation:
        monotone = False
    return {
        "dist": ev.dist,
        "payoff_gap": ev.payoff_gap,
        "threshold_gap": ev.threshold_gap,
        "phi_gap": abs(ev.solution.phi - problem.params.beta),
        "bellman_residual": bellman,
        "monotone": monotone,
        "tail_mass": ctx.tail,
        "boundary_mass": float(ev.solution.pi[:, -1].sum()),
        "kappa": ev.kappa * problem.params.lam,
        "implied_V_sw": ev.implied_V_sw,
        "accepted": ev.dist <= eps2,
        "eps2": eps2,
    }


def with_config(config: SolverConfig, **changes) -> SolverConfig:
    return replace(config, **changes)
