"""The tagged agent's optimal stopping problem.

From state (z, n) with n = 1..L agents present (the tagged agent included),
the first event after a stay decision is one of

* the tagged agent's own epoch (rate lam), ending the step at V(z, n);
* an arrival (rate kappa, blocked at n = L);
* a resource flip z -> y (rate mu[z, y]);
* a competitor leaving (rate (n-1) lam (1 - gamma xi(z, n)));
* a competitor staying (rate (n-1) lam gamma xi(z, n)), a self-loop that is
  dropped from the denominator.

Writing that recursion as ``M @ V_st = lam * V`` gives the exact one-epoch
expectation operator ``P = lam * M^-1``, and the Bellman map
``V -> F + gamma * max(P V, V_sw)`` is a gamma-contraction in sup-norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gammaln, logsumexp

from .ctmc import StationarySolution, stay_matrix
from .errors import DegenerateLowerBound, MonotonicityViolation, NonConvergence
from .model import ModelParams, ResourceProcess, SharingFunction, Strategy, sup_norm

MAX_SWEEPS = 1_000_000
MAX_POLICY_STEPS = 500


@dataclass(frozen=True)
class ValueFunctions:
    """V and V_st over (z, n) for n = 1..L; column j holds n = j + 1."""

    V: np.ndarray
    V_st: np.ndarray
    iterations: int
    final_delta: float
    policy_steps: int = 0

    @property
    def L(self) -> int:
        return self.V.shape[1]


@dataclass(frozen=True)
class ThresholdIntervals:
    lower: np.ndarray
    upper: np.ndarray

    def distance(self, x) -> float:
        """Euclidean distance from ``x`` to the box of intervals."""
        x = np.asarray(x, dtype=float)
        gap = np.maximum(self.lower - x, 0.0) + np.maximum(x - self.upper, 0.0)
        return float(np.sqrt(np.sum(gap ** 2)))

    def contains(self, x) -> bool:
        return self.distance(x) == 0.0


class TaggedChain:
    """Factorized first-transition system of the tagged agent for fixed (xi, kappa)."""

    def __init__(self, params: ModelParams, resource: ResourceProcess, F: SharingFunction,
                 strategy: Strategy, kappa: float, L: int):
        self.params = params
        self.L = L
        self.nz = resource.size
        self.F = F.values(L)
        self.scale = float(self.F.max())
        nz = self.nz
        lam, gamma = params.lam, params.gamma
        n = np.arange(1, L + 1, dtype=float)
        xi = stay_matrix(strategy, L + 1)[:, 1:]
        leave = (n - 1.0)[None, :] * lam * (1.0 - gamma * xi)
        arrive = np.full((nz, L), float(kappa))
        arrive[:, -1] = 0.0
        flips = resource.exit_rates
        diag = lam + arrive + flips[:, None] + leave

        idx = np.arange(nz * L).reshape(nz, L)
        rows = [idx.ravel()]
        cols = [idx.ravel()]
        vals = [diag.ravel()]
        rows.append(idx[:, :-1].ravel())
        cols.append(idx[:, 1:].ravel())
        vals.append(-arrive[:, :-1].ravel())
        rows.append(idx[:, 1:].ravel())
        cols.append(idx[:, :-1].ravel())
        vals.append(-leave[:, 1:].ravel())
        for z in range(nz):
            for y in range(nz):
                if y != z:
                    rows.append(idx[z])
                    cols.append(idx[y])
                    vals.append(np.full(L, -resource.rates[z, y]))
        self.M = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(nz * L, nz * L))
        self._lu = spla.splu(self.M)
        self._last_stay = None

    def continuation(self, V: np.ndarray) -> np.ndarray:
        """V_st = E[V at the next own epoch]; ``V`` may carry extra trailing columns."""
        flat = V.reshape(self.nz * self.L, -1)
        out = self._lu.solve(np.ascontiguousarray(self.params.lam * flat))
        return out.reshape(V.shape)

    def sweep(self, V: np.ndarray, V_sw) -> tuple[np.ndarray, np.ndarray]:
        """One synchronous Bellman update; returns (V_st from V, new V)."""
        V_st = self.continuation(V)
        return V_st, self._bellman(V_st, V_sw)

    def _bellman(self, V_st, V_sw):
        F = self.F if V_st.ndim == 2 else self.F[..., None]
        return F + self.params.gamma * np.maximum(V_st, V_sw)

    def policy_value(self, stay: np.ndarray, V_sw: float) -> np.ndarray:
        """V_st of the agent who stays exactly on ``stay`` (boolean (z, n) mask)."""
        g, lam = self.params.gamma, self.params.lam
        s = stay.ravel().astype(float)
        A = (self.M - sp.diags(lam * g * s)).tocsc()
        rhs = lam * (self.F.ravel() + g * (1.0 - s) * V_sw)
        return spla.spsolve(A, rhs).reshape(self.nz, self.L)

    def value_iterate(self, V_sw, eps0: float, max_sweeps: int = MAX_SWEEPS, V0=None):
        """Sweeps until the sup-norm change is <= eps0 * scale * (1 - gamma) / gamma."""
        gamma = self.params.gamma
        V_sw = np.asarray(V_sw, dtype=float)
        V = self._bellman(np.zeros(self.F.shape + V_sw.shape), V_sw) if V0 is None else V0
        tol = eps0 * self.scale * (1.0 - gamma) / gamma
        for it in range(1, max_sweeps + 1):
            V_st, V_new = self.sweep(V, V_sw)
            delta = float(np.abs(V_new - V).max())
            V = V_new
            if delta <= tol:
                return V, V_st, it, delta
        raise NonConvergence(f"value iteration did not reach {tol:.3g} in {max_sweeps} sweeps "
                             f"(last change {delta:.3g})")

    def policy_iterate(self, V_sw: float, stay=None, warm: bool = False):
        """Howard policy iteration from ``stay``, else from the last policy
        found when ``warm``, else from the always-stay policy."""
        if stay is None:
            stay = self._last_stay if warm and self._last_stay is not None else None
        if stay is None:
            stay = np.ones(self.F.shape, dtype=bool)
        return self.polish(None, V_sw, stay=stay)

    def polish(self, V_st, V_sw: float, stay=None):
        """Policy iteration from the greedy policy of ``V_st``; exact fixed point."""
        if stay is None:
            stay = V_st > V_sw
        for step in range(1, MAX_POLICY_STEPS + 1):
            V_st = self.policy_value(stay, V_sw)
            better = np.where(V_st > V_sw, True, np.where(V_st < V_sw, False, stay))
            if np.array_equal(better, stay):
                self._last_stay = stay
                return V_st, step
            stay = better
        raise NonConvergence("policy iteration did not settle")


def value_iterate(params: ModelParams, resource: ResourceProcess, F: SharingFunction,
                  strategy: Strategy, kappa: float, V_sw: float, L: int, eps0: float = 1e-4,
                  *, polish: bool = True, max_sweeps: int = MAX_SWEEPS,
                  chain: TaggedChain | None = None, method: str = "value") -> ValueFunctions:
    """Solve DEC(xi, kappa, V_sw) on the truncated space.

    Value iteration runs until the iterate is within ``eps0 * ||F||_inf`` of
    the fixed point. With ``polish`` the greedy policy is then improved by
    policy iteration, which lands on the fixed point itself; this keeps the
    switching payoff a continuous function of ``(x, V_sw)``.

    ``method="policy"`` skips value iteration and runs policy iteration
    from the always-stay policy; it reaches the same fixed point and is much
    faster when gamma is close to 1.
    """
    if not eps0 > 0:
        raise ValueError("eps0 must be > 0")
    chain = chain or TaggedChain(params, resource, F, strategy, kappa, L)
    if method == "policy":
        V_st, steps = chain.policy_iterate(float(V_sw))
        return ValueFunctions(chain._bellman(V_st, float(V_sw)), V_st, 0, 0.0, steps)
    if method != "value":
        raise ValueError(f"method must be 'value' or 'policy', got {method!r}")
    V, V_st, it, delta = chain.value_iterate(float(V_sw), eps0, max_sweeps=max_sweeps)
    steps = 0
    if polish:
        V_st, steps = chain.polish(V_st, float(V_sw))
        V = chain._bellman(V_st, float(V_sw))
    return ValueFunctions(V, V_st, it, delta, steps)


def switch_value(sol: StationarySolution, vf: ValueFunctions) -> float:
    """Expected V_st(z, n+1) for an agent joining a location drawn from ``sol.pi``."""
    if vf.V_st.shape != sol.pi.shape:
        raise ValueError(f"pi has shape {sol.pi.shape} but V_st has {vf.V_st.shape}")
    return float(np.sum(sol.pi * vf.V_st))


def check_monotone(V_st: np.ndarray, tol: float) -> None:
    rise = np.diff(V_st, axis=1)
    if rise.size and rise.max() > tol:
        z, j = np.unravel_index(np.argmax(rise), rise.shape)
        raise MonotonicityViolation(
            f"V_st({z}, {j + 2}) exceeds V_st({z}, {j + 1}) by {rise.max():.3g}")


def optimal_threshold_set(vf: ValueFunctions, V_sw: float, eps: float,
                          mono_tol: float = 1e-8) -> ThresholdIntervals:
    """Thresholds consistent with staying where V_st > V_sw + eps and leaving
    where V_st < V_sw - eps.

    ``mono_tol`` is relative to ``max(1, max|V_st|)``.
    """
    V_st = vf.V_st
    L = V_st.shape[1]
    check_monotone(V_st, mono_tol * max(1.0, float(np.abs(V_st).max())))
    n = np.arange(1, L + 1)

    def last(mask):
        return np.where(mask.any(axis=1), (np.where(mask, n, 0)).max(axis=1), 0)

    lower = np.minimum(1 + last(V_st > V_sw + eps), L - 1).astype(float)
    upper = np.minimum(1 + last(V_st >= V_sw - eps), L - 1).astype(float)
    lower = np.where(last(V_st > V_sw + eps) == 0, 0.0, lower)
    upper = np.where(last(V_st >= V_sw - eps) == 0, 0.0, upper)
    return ThresholdIntervals(lower, np.maximum(upper, lower))


def lower_bound_terms(params: ModelParams, resource: ResourceProcess, F: SharingFunction, L: int):
    """Log of each series term, shape (states, L); column j pairs n = j with F(z, j+1)."""
    beta, gamma = params.beta, params.gamma
    psi = float(resource.exit_rates.max()) / params.lam
    n = np.arange(L, dtype=float)
    Fv = F.values(L)
    with np.errstate(divide="ignore"):
        log_w = (n * math.log(beta * (1.0 - gamma)) - (n + 1.0) * math.log(1.0 + beta + psi)
                 - gammaln(n + 2.0))
        return log_w[None, :] + np.log(resource.stationary)[:, None] + np.log(Fv)


def value_bounds(params: ModelParams, resource: ResourceProcess, F: SharingFunction,
                 L: int) -> tuple[float, float]:
    """Uniform bounds (lower, upper) on the switching payoff.

    The series for the lower bound is summed in log space over n + 1 <= L,
    stopping once a term drops below 1e-15 of the running sum.
    """
    upper = sup_norm(F, L) / (1.0 - params.gamma)
    terms = lower_bound_terms(params, resource, F, L)
    col = logsumexp(terms, axis=0)
    running = np.logaddexp.accumulate(col)
    small = np.nonzero(col[1:] < running[:-1] + math.log(1e-15))[0]
    # terms decay eventually; stop at the first negligible one past the peak
    peak = int(np.argmax(col))
    small = small[small + 1 > peak]
    cut = int(small[0]) + 1 if small.size else L
    log_sum = logsumexp(col[:cut])
    log_lower = -params.beta / (1.0 - params.gamma) + log_sum
    lower = math.exp(log_lower) if log_lower > -745.0 else 0.0
    if not lower > 0:
        raise DegenerateLowerBound(f"lower bound underflows (log = {log_lower:.1f})")
    return lower, upper
