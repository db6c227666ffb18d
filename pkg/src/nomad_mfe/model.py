"""Core domain types: resource process, sharing functions, strategies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, ModelError, NonPositiveRate, OccupancyZero, OutOfRange


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelParams:
    """Decision-epoch rate ``lam``, survival probability ``gamma``, agent density ``beta``."""

    lam: float
    gamma: float
    beta: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ModelError(f"lambda must be > 0, got {self.lam}")
        if not 0 < self.gamma < 1:
            raise ModelError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.beta > 0:
            raise ModelError(f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True)
class ResourceProcess:
    states: tuple
    rates: np.ndarray
    stationary: np.ndarray

    @property
    def size(self) -> int:
        return len(self.states)

    @property
    def exit_rates(self) -> np.ndarray:
        """Total outflow rate from each state (diagonal excluded)."""
        off = self.rates.copy()
        np.fill_diagonal(off, 0.0)
        return off.sum(axis=1)

    def scaled(self, c: float) -> "ResourceProcess":
        return make_resource_process(self.states, np.asarray(self.rates) * c)


def _stationary_of_rates(rates: np.ndarray) -> np.ndarray:
    m = rates.shape[0]
    if m == 1:
        return np.ones(1)
    q = rates.copy()
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    # pi Q = 0 with the last balance equation swapped for sum(pi) = 1
    a = q.T.copy()
    a[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    pi = np.linalg.solve(a, b)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def make_resource_process(states: Sequence, rates) -> ResourceProcess:
    """Build a resource chain and compute its stationary law.

    ``rates[z][y]`` is the transition rate from ``z`` to ``y``; the diagonal
    is ignored. Every off-diagonal rate must be strictly positive.
    """
    rates = np.array(rates, dtype=float)
    states = tuple(states)
    if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
        raise DimensionMismatch(f"rate matrix must be square, got shape {rates.shape}")
    if rates.shape[0] != len(states):
        raise DimensionMismatch(
            f"{len(states)} states but rate matrix has {rates.shape[0]} rows")
    if len(states) < 1:
        raise DimensionMismatch("need at least one resource state")
    off = ~np.eye(len(states), dtype=bool)
    if np.any(~(rates[off] > 0)):
        raise NonPositiveRate("all off-diagonal transition rates must be > 0")
    rates = rates.copy()
    np.fill_diagonal(rates, 0.0)
    return ResourceProcess(states, _frozen(rates), _frozen(_stationary_of_rates(rates)))


@dataclass(frozen=True)
class SharingFunction:
    """Payoff F(z, n) received at a decision epoch.

    ``power`` kind: ``F(z, n) = level_payoff[z] * n**(-alpha)``.
    ``table`` kind: ``table[z, n-1]`` for n = 1..L, with a declared
    ``decreasing`` flag that is checked on construction.
    """

    kind: str
    level_payoff: np.ndarray | None = None
    alpha: float | None = None
    table: np.ndarray | None = None
    decreasing: bool = True

    def __post_init__(self):
        if self.kind == "power":
            if self.level_payoff is None or self.alpha is None:
                raise ModelError("power sharing function needs level_payoff and alpha")
            g = _frozen(self.level_payoff)
            object.__setattr__(self, "level_payoff", g)
            if not self.alpha > 0:
                raise ModelError(f"alpha must be > 0, got {self.alpha}")
            if np.any(g < 0) or not np.any(g > 0):
                raise ModelError("level payoffs must be >= 0 with at least one > 0")
            object.__setattr__(self, "decreasing", True)
        elif self.kind == "table":
            if self.table is None:
                raise ModelError("table sharing function needs a table")
            t = _frozen(self.table)
            if t.ndim != 2 or t.shape[1] < 1:
                raise DimensionMismatch("table must have shape (states, L)")
            object.__setattr__(self, "table", t)
            if np.any(t < 0) or not np.any(t > 0):
                raise ModelError("table payoffs must be >= 0 with at least one > 0")
            if self.decreasing and np.any(np.diff(t, axis=1) > 0):
                raise ModelError("table declared decreasing but F(z, n+1) > F(z, n) somewhere")
        else:
            raise ModelError(f"unknown sharing kind {self.kind!r}")

    @classmethod
    def power(cls, level_payoff, alpha: float) -> "SharingFunction":
        return cls("power", level_payoff=level_payoff, alpha=alpha)

    @classmethod
    def from_table(cls, table, decreasing: bool = True) -> "SharingFunction":
        return cls("table", table=table, decreasing=decreasing)

    @property
    def n_states(self) -> int:
        return len(self.level_payoff) if self.kind == "power" else self.table.shape[0]

    def values(self, L: int) -> np.ndarray:
        """Matrix of F(z, n) for n = 1..L, shape (states, L)."""
        if self.kind == "power":
            n = np.arange(1, L + 1, dtype=float)
            return np.outer(self.level_payoff, n ** (-self.alpha))
        if L > self.table.shape[1]:
            raise OutOfRange(f"table covers n <= {self.table.shape[1]}, asked for L={L}")
        return np.array(self.table[:, :L])

    def scaled(self, c: float) -> "SharingFunction":
        if self.kind == "power":
            return SharingFunction.power(self.level_payoff * c, self.alpha)
        return SharingFunction.from_table(self.table * c, self.decreasing)


def eval_sharing(F: SharingFunction, z: int, n: int) -> float:
    if n < 1:
        raise OccupancyZero("payoff is undefined at an empty location (n = 0)")
    if F.kind == "power":
        return float(F.level_payoff[z] * n ** (-F.alpha))
    if n > F.table.shape[1]:
        raise OutOfRange(f"table covers n <= {F.table.shape[1]}, asked for n={n}")
    return float(F.table[z, n - 1])


def sup_norm(F: SharingFunction, L: int) -> float:
    return float(F.values(L).max())


@dataclass(frozen=True)
class Strategy:
    """Stay probabilities ``stay_prob[z, n]`` for n = 0..L.

    Lookups past the last column reuse it, so a threshold strategy keeps
    leaving at any occupancy above the truncation.
    """

    stay_prob: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = _frozen(self.stay_prob)
        if p.ndim != 2:
            raise DimensionMismatch("stay_prob must be a (states, L+1) matrix")
        if np.any(p < 0) or np.any(p > 1):
            raise OutOfRange("stay probabilities must lie in [0, 1]")
        if np.any(p[:, 0] != 1.0):
            raise ModelError("stay_prob[z, 0] must equal 1 by convention")
        object.__setattr__(self, "stay_prob", p)

    @property
    def L(self) -> int:
        return self.stay_prob.shape[1] - 1

    @property
    def n_states(self) -> int:
        return self.stay_prob.shape[0]

    def stay(self, z: int, n: int) -> float:
        return float(self.stay_prob[z, min(n, self.L)])

    @classmethod
    def constant(cls, n_states: int, L: int, p: float) -> "Strategy":
        s = np.full((n_states, L + 1), float(p))
        s[:, 0] = 1.0
        return cls(s)


def strategy_from_threshold(x, L: int) -> Strategy:
    """Threshold strategy: stay below floor(x_z), mix at floor(x_z), leave above."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0) or np.any(x > L - 1) or np.any(~np.isfinite(x)):
        raise OutOfRange(f"thresholds must lie in [0, {L - 1}], got {x.tolist()}")
    n = np.arange(L + 1)
    fl = np.floor(x)
    s = np.where(n[None, :] < fl[:, None], 1.0, 0.0)
    s = np.where(n[None, :] == fl[:, None], (x - fl)[:, None], s)
    s[:, 0] = 1.0
    return Strategy(s)
