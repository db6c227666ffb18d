"""Truncated single-location chain: generator, stationary law, arrival rate.

States of the truncated space are (z, n) with n = 0..L-1, stored at flat
index ``z * L + n``. Arrivals out of n = L-1 are blocked.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import poisson

from .errors import NoBracket, NonConvergence, SingularSystem, TruncationTooSmall
from .model import ModelParams, ResourceProcess, Strategy

log = logging.getLogger(__name__)

MAX_BISECTION_STEPS = 200
TAIL_WARN_LEVEL = 1e-8


@dataclass(frozen=True)
class Generator:
    Q: sp.csr_matrix
    L: int
    kappa: float
    params: ModelParams
    resource: ResourceProcess
    strategy: Strategy

    @property
    def n_states(self) -> int:
        return self.resource.size

    def rate(self, z, n, x, m) -> float:
        return float(self.Q[z * self.L + n, x * self.L + m])


@dataclass(frozen=True)
class StationarySolution:
    pi: np.ndarray  # shape (states, L), pi[z, n]
    kappa: float
    phi: float
    residual: float

    @property
    def L(self) -> int:
        return self.pi.shape[1]

    @property
    def occupancy_marginal(self) -> np.ndarray:
        return self.pi.sum(axis=0)


def stay_matrix(strategy: Strategy, upto: int) -> np.ndarray:
    """stay_prob[z, n] for n = 0..upto-1, padding past the strategy with its last column."""
    p = strategy.stay_prob
    if p.shape[1] >= upto:
        return np.array(p[:, :upto])
    pad = np.repeat(p[:, -1:], upto - p.shape[1], axis=1)
    return np.hstack([p, pad])


def _departure_rates(params, strategy, nz, L):
    n = np.arange(L, dtype=float)
    xi = stay_matrix(strategy, L)
    return params.lam * n[None, :] * (1.0 - params.gamma * xi)


def _generator_parts(params, resource, strategy, L):
    """Off-diagonal COO pieces of Q split into the kappa-free part and the arrival part."""
    if L < 2:
        raise TruncationTooSmall(f"truncation level L must be >= 2, got {L}")
    nz = resource.size
    idx = np.arange(nz * L).reshape(nz, L)
    dep = _departure_rates(params, strategy, nz, L)

    rows, cols, vals = [], [], []
    for z in range(nz):
        for y in range(nz):
            if y != z:
                rows.append(idx[z])
                cols.append(idx[y])
                vals.append(np.full(L, resource.rates[z, y]))
        rows.append(idx[z, 1:])
        cols.append(idx[z, :-1])
        vals.append(dep[z, 1:])
    r0 = np.concatenate(rows)
    c0 = np.concatenate(cols)
    v0 = np.concatenate(vals)
    ra = idx[:, :-1].ravel()
    ca = idx[:, 1:].ravel()
    return (r0, c0, v0), (ra, ca)


def _assemble(parts, kappa, size):
    (r0, c0, v0), (ra, ca) = parts
    rows = np.concatenate([r0, ra])
    cols = np.concatenate([c0, ca])
    vals = np.concatenate([v0, np.full(ra.size, float(kappa))])
    out = np.bincount(rows, weights=vals, minlength=size)
    rows = np.concatenate([rows, np.arange(size)])
    cols = np.concatenate([cols, np.arange(size)])
    vals = np.concatenate([vals, -out])
    return rows, cols, vals


def build_generator(params: ModelParams, resource: ResourceProcess, strategy: Strategy,
                    kappa: float, L: int) -> Generator:
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    size = resource.size * L
    rows, cols, vals = _assemble(_generator_parts(params, resource, strategy, L), kappa, size)
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(size, size))
    return Generator(Q, L, float(kappa), params, resource, strategy)


def _pin_state(rows, cols, vals, size, nz, L, weights):
    """A state likely to carry non-negligible mass.

    Mode of the birth-death chain whose departure rates are the resource
    averaged ones, paired with the most likely resource level.
    """
    up = np.zeros(size)
    down = np.zeros(size)
    fwd = cols == rows + 1
    np.add.at(up, rows[fwd], vals[fwd])
    back = (cols == rows - 1) & (rows % L != 0)
    np.add.at(down, rows[back], vals[back])
    up = weights @ up.reshape(nz, L)[:, :-1]
    down = weights @ down.reshape(nz, L)[:, 1:]
    with np.errstate(divide="ignore"):
        steps = np.log(np.maximum(up, 1e-300)) - np.log(np.maximum(down, 1e-300))
    n = int(np.argmax(np.concatenate([[0.0], np.cumsum(steps)])))
    return int(np.argmax(weights)) * L + n


def _lu_solve(r, c, v, size, k):
    A = sp.csc_matrix((v, (r, c)), shape=(size, size))
    b = np.zeros(size)
    b[k] = 1.0
    try:
        return spla.splu(A).solve(b)
    except RuntimeError:
        return None


def _acceptable(pi):
    if pi is None or not np.all(np.isfinite(pi)):
        return False
    top = np.abs(pi).max()
    return top > 0 and pi.min() >= -1e-10 * top


def _solve_balance(rows, cols, vals, size, nz, L, weights):
    # Q^T pi = 0 with one balance equation swapped for pi_k = 1, then normalized.
    # A dense sum(pi) = 1 row costs several times more fill-in, so it is only
    # the fallback when the pinned solve loses accuracy.
    k = _pin_state(rows, cols, vals, size, nz, L, weights)
    keep = cols != k
    pi = _lu_solve(np.concatenate([cols[keep], [k]]), np.concatenate([rows[keep], [k]]),
                   np.concatenate([vals[keep], [1.0]]), size, k)
    if not _acceptable(pi):
        k = size - 1
        keep = cols != k
        pi = _lu_solve(np.concatenate([cols[keep], np.full(size, k)]),
                       np.concatenate([rows[keep], np.arange(size)]),
                       np.concatenate([vals[keep], np.ones(size)]), size, k)
    if not _acceptable(pi):
        Q = sp.csr_matrix((vals, (rows, cols)), shape=(size, size))
        pi = _uniformized_power(Q)
    return pi / pi.sum()


def _uniformized_power(Q, tol=1e-14, max_iter=1_000_000):
    diag = -Q.diagonal()
    unif = diag.max() * 1.05
    if unif <= 0:
        raise SingularSystem("generator has no transitions")
    P = (sp.identity(Q.shape[0], format="csr") + Q / unif).T.tocsr()
    pi = np.full(Q.shape[0], 1.0 / Q.shape[0])
    for _ in range(max_iter):
        nxt = P @ pi
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < tol:
            return nxt
        pi = nxt
    raise SingularSystem("uniformized power iteration did not converge")


def _finish(pi_flat, Q_rows, Q_cols, Q_vals, size, nz, L, kappa):
    pi_flat = np.clip(pi_flat, 0.0, None)
    pi_flat = pi_flat / pi_flat.sum()
    flow = np.bincount(Q_cols, weights=pi_flat[Q_rows] * Q_vals, minlength=size)
    residual = float(np.abs(flow).max())
    if not np.isfinite(residual) or residual > 1e-8:
        raise SingularSystem(f"stationary solve left residual {residual:.3e}")
    pi = pi_flat.reshape(nz, L)
    phi = float(pi.sum(axis=0) @ np.arange(L))
    return StationarySolution(pi, float(kappa), phi, residual)


def steady_state(g: Generator) -> StationarySolution:
    """Stationary distribution of a truncated generator by direct sparse solve."""
    Q = g.Q.tocoo()
    size = Q.shape[0]
    pi = _solve_balance(Q.row, Q.col, Q.data, size, g.n_states, g.L,
                        g.resource.stationary)
    return _finish(pi, Q.row, Q.col, Q.data, size, g.n_states, g.L, g.kappa)


def expected_occupancy(sol: StationarySolution) -> float:
    return float(sol.pi.sum(axis=0) @ np.arange(sol.L))


def dominating_tail(mean: float, L: int) -> float:
    """P(X > L-1) for X ~ Poisson(mean), the law of the stay-always upper chain."""
    return float(poisson.sf(L - 1, mean))


@functools.lru_cache(maxsize=64)
def check_truncation(beta: float, gamma: float, L: int) -> float:
    tail = dominating_tail(beta / (1.0 - gamma), L)
    if tail >= TAIL_WARN_LEVEL:
        log.warning("truncation L=%d: the stay-always Poisson bound leaves tail mass %.3g "
                    "above L-1 (beta=%g, gamma=%g); the bound is conservative, check the "
                    "boundary mass of the solution", L, tail, beta, gamma)
    return tail


class _OccupancyMap:
    """kappa -> stationary solution for a fixed strategy, reusing the sparsity pattern."""

    def __init__(self, params, resource, strategy, L):
        self.parts = _generator_parts(params, resource, strategy, L)
        self.nz = resource.size
        self.L = L
        self.size = self.nz * L
        self.weights = resource.stationary

    def __call__(self, kappa) -> StationarySolution:
        rows, cols, vals = _assemble(self.parts, kappa, self.size)
        pi = _solve_balance(rows, cols, vals, self.size, self.nz, self.L, self.weights)
        return _finish(pi, rows, cols, vals, self.size, self.nz, self.L, kappa)


def solve_kappa(params: ModelParams, resource: ResourceProcess, strategy: Strategy,
                L: int, eps1: float = 1e-6):
    """Bracketed root search on [beta*lam*(1-gamma), beta*lam] for expected occupancy = beta.

    Returns ``(kappa, StationarySolution)`` with ``|phi - beta| <= eps1``.
    """
    if not eps1 > 0:
        raise ValueError("eps1 must be > 0")
    check_truncation(params.beta, params.gamma, L)
    occ = _OccupancyMap(params, resource, strategy, L)
    beta = params.beta
    lo = beta * params.lam * (1.0 - params.gamma)
    hi = beta * params.lam
    s_lo = occ(lo)
    if abs(s_lo.phi - beta) <= eps1:
        return lo, s_lo
    s_hi = occ(hi)
    if abs(s_hi.phi - beta) <= eps1:
        return hi, s_hi
    if (s_lo.phi - beta) * (s_hi.phi - beta) > 0:
        raise NoBracket(
            f"phi({lo:.6g})={s_lo.phi:.6g}, phi({hi:.6g})={s_hi.phi:.6g} do not bracket "
            f"beta={beta} (truncation L={L} too small?)")
    # Illinois regula falsi inside the bracket; every third step is a plain
    # bisection so the bracket still shrinks geometrically.
    f_lo, f_hi = s_lo.phi - beta, s_hi.phi - beta
    side = 0
    for step in range(MAX_BISECTION_STEPS):
        if step % 3 == 2:
            mid = 0.5 * (lo + hi)
        else:
            mid = (lo * f_hi - hi * f_lo) / (f_hi - f_lo)
            if not lo < mid < hi:
                mid = 0.5 * (lo + hi)
        s = occ(mid)
        f = s.phi - beta
        if abs(f) <= eps1:
            return mid, s
        if f < 0:
            lo, f_lo = mid, f
            if side == -1:
                f_hi *= 0.5
            side = -1
        else:
            hi, f_hi = mid, f
            if side == 1:
                f_lo *= 0.5
            side = 1
    raise NonConvergence(f"arrival-rate search did not reach |phi - beta| <= {eps1} in "
                         f"{MAX_BISECTION_STEPS} steps")
