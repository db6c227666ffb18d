"""Monte-Carlo validators: one location, the coupled sandwich, and the finite system."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .ctmc import stay_matrix
from .errors import InvalidSystem
from .model import ModelParams, ResourceProcess, SharingFunction, Strategy

N_BATCHES = 20


class _Uniforms:
    """Buffered U(0, 1) draws; per-call Generator overhead dominates otherwise."""

    def __init__(self, rng: np.random.Generator, size: int = 1 << 16):
        self.rng = rng
        self.size = size
        self.buf = rng.random(size)
        self.i = 0

    def __call__(self) -> float:
        if self.i == self.size:
            self.buf = self.rng.random(self.size)
            self.i = 0
        u = self.buf[self.i]
        self.i += 1
        return u

    def exp(self, rate: float) -> float:
        return -math.log(1.0 - self()) / rate


def _choice(u: float, weights) -> int:
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if u < acc:
            return i
    return len(weights) - 1


def batch_halfwidth(batch_means) -> float:
    b = np.asarray(batch_means, dtype=float)
    b = b[np.isfinite(b)]
    if b.size < 2:
        return math.nan
    return float(stats.t.ppf(0.975, b.size - 1) * b.std(ddof=1) / math.sqrt(b.size))


class _StayLookup:
    """xi(z, n) with the last column reused beyond the strategy's range."""

    def __init__(self, strategy: Strategy, upto: int):
        self.table = stay_matrix(strategy, upto).tolist()
        self.last = len(self.table[0]) - 1

    def __call__(self, z: int, n: int) -> float:
        row = self.table[z]
        return row[n] if n <= self.last else row[self.last]


@dataclass(frozen=True)
class TrajectoryStats:
    horizon: float
    seed: int | None
    mean_occupancy: float
    occupancy_halfwidth: float
    distribution: np.ndarray = field(repr=False)
    payoff_rate: float
    payoff_halfwidth: float
    events: int
    elapsed: float
    final_state: tuple


def simulate_location(params: ModelParams, resource: ResourceProcess, strategy: Strategy,
                      kappa: float, horizon: float, seed=None, *, L: int | None = None,
                      max_events: int | None = None, sharing: SharingFunction | None = None,
                      start: tuple | None = None, warmup: float = 0.0) -> TrajectoryStats:
    """Exact event simulation of one location on the truncated space.

    Arrivals are blocked at n = L - 1 (``L`` defaults to the strategy's).
    Every agent epoch is an event, including the ones where the agent stays,
    so the realized payoff rate is available when ``sharing`` is given. The
    run stops at time ``horizon`` or after ``max_events`` events.
    Time averages skip the first ``warmup`` time units.
    """
    if math.isinf(horizon):
        raise ValueError("horizon must be finite; cap the run with max_events instead")
    L = strategy.L if L is None else L
    nz = resource.size
    rng = np.random.default_rng(seed)
    u = _Uniforms(rng)
    xi = _StayLookup(strategy, L)
    rates = np.asarray(resource.rates).tolist()
    exits = resource.exit_rates.tolist()
    Fv = sharing.values(L).tolist() if sharing is not None else None
    lam, gamma = params.lam, params.gamma
    if start is None:
        z, n = _choice(u(), resource.stationary), 0
    else:
        z, n = int(start[0]), int(start[1])
    empty = np.zeros((nz, L))
    if not horizon > 0 or max_events == 0:
        return TrajectoryStats(max(horizon, 0.0), seed, math.nan, math.nan, empty, math.nan,
                               math.nan, 0, 0.0, (z, n))

    occ_time = np.zeros((nz, L))
    batch_len = (horizon - warmup) / N_BATCHES
    batch_occ = np.zeros(N_BATCHES)
    batch_pay = np.zeros(N_BATCHES)
    t = 0.0
    events = 0
    cap = math.inf if max_events is None else max_events
    while events < cap:
        arr = kappa if n < L - 1 else 0.0
        epoch = lam * n
        total = exits[z] + arr + epoch
        dt = u.exp(total)
        t_next = min(t + dt, horizon)
        if t_next > warmup:
            lo = max(t, warmup)
            span = t_next - lo
            occ_time[z, n] += span
            _spread(batch_occ, lo - warmup, t_next - warmup, batch_len, n)
        t += dt
        if t >= horizon:
            t = horizon
            break
        events += 1
        r = u() * total
        if r < exits[z]:
            row = rates[z]
            acc = 0.0
            for y in range(nz):
                if y != z:
                    acc += row[y]
                    if r < acc:
                        z = y
                        break
        elif r < exits[z] + arr:
            n += 1
        else:
            if Fv is not None and t > warmup:
                b = min(int((t - warmup) / batch_len), N_BATCHES - 1)
                batch_pay[b] += Fv[z][n - 1]
            if u() < 1.0 - gamma * xi(z, n):
                n -= 1

    elapsed = t - warmup
    if elapsed <= 0:
        return TrajectoryStats(horizon, seed, math.nan, math.nan, empty, math.nan, math.nan,
                               events, t, (z, n))
    dist = occ_time / occ_time.sum()
    mean = float(dist.sum(axis=0) @ np.arange(L))
    full = int(elapsed // batch_len) if batch_len > 0 else 0
    full = min(full, N_BATCHES)
    occ_hw = batch_halfwidth(batch_occ[:full] / batch_len) if full >= 2 else math.nan
    if Fv is not None:
        pay_rate = float(batch_pay.sum() / elapsed)
        pay_hw = batch_halfwidth(batch_pay[:full] / batch_len) if full >= 2 else math.nan
    else:
        pay_rate = pay_hw = math.nan
    return TrajectoryStats(horizon, seed, mean, occ_hw, dist, pay_rate, pay_hw, events, t, (z, n))


def _spread(acc, a, b, width, value):
    """Add ``value * overlap`` of [a, b) with each batch [i*width, (i+1)*width)."""
    i = min(int(a / width), len(acc) - 1)
    while a < b:
        end = (i + 1) * width if i < len(acc) - 1 else b
        seg = min(b, end) - a
        acc[i] += value * seg
        a += seg
        i += 1


@dataclass(frozen=True)
class DominanceReport:
    events: int
    sandwich_fraction: float
    holds: bool
    upper_equal: bool
    lower_equal: bool
    final: tuple


def simulate_coupled_dominance(params: ModelParams, resource: ResourceProcess,
                               strategy: Strategy, kappa: float, horizon: float, seed=None,
                               *, start_n: int = 0, max_events: int | None = None
                               ) -> DominanceReport:
    """Run X1 ~ M/M/inf(lam, kappa), N ~ MC(xi, kappa) and X2 ~ M/M/inf((1-gamma) lam, kappa)
    on one shared event stream and check X1 <= N <= X2 after every event.

    X2 (the chain with xi = 1) drives the clock. N follows it through the
    thinning construction: on an X2 departure N departs with probability
    min(zeta, 1); on an X2 stay epoch with probability eta. X1 is coupled to N
    the same way, treating every event that leaves N unchanged as N's
    self-loop. All three start from ``start_n`` with a shared resource state.
    """
    rng = np.random.default_rng(seed)
    u = _Uniforms(rng)
    xi = _StayLookup(strategy, strategy.L + 1)
    lam, g = params.lam, params.gamma
    rates = np.asarray(resource.rates).tolist()
    exits = resource.exit_rates.tolist()
    nz = resource.size
    z = _choice(u(), resource.stationary)
    x1 = n = x2 = int(start_n)
    t = 0.0
    events = 0
    ok = 0
    upper_eq = lower_eq = True
    cap = math.inf if max_events is None else max_events
    while events < cap:
        total = exits[z] + kappa + lam * x2
        t += u.exp(total)
        if t >= horizon:
            break
        events += 1
        r = u() * total
        if r < exits[z]:
            acc = 0.0
            for y in range(nz):
                if y != z:
                    acc += rates[z][y]
                    if r < acc:
                        z = y
                        break
        elif r < exits[z] + kappa:
            x1 += 1
            n += 1
            x2 += 1
        else:
            # X2 epoch; it departs with probability 1 - gamma
            d2 = lam * x2 * (1.0 - g)
            leave2 = r < exits[z] + kappa + d2
            p_n = 1.0 - g * xi(z, n)
            if leave2:
                zeta = n * p_n / (x2 * (1.0 - g))
                n_leaves = u() < min(zeta, 1.0)
            else:
                zeta = n * p_n / (x2 * (1.0 - g))
                eta = (1.0 - g) / g * max(zeta - 1.0, 0.0)
                n_leaves = u() < eta
            # X1 against N: N's departure mass is lam n p_n per unit clock rate
            dn = lam * n * p_n
            if n_leaves:
                zeta1 = x1 / (n * p_n) if n * p_n > 0 else 0.0
                x1_leaves = u() < min(zeta1, 1.0)
            else:
                rest = lam * x2 - dn
                extra = max(lam * x1 - dn, 0.0)
                x1_leaves = rest > 0 and u() < extra / rest
            if leave2:
                x2 -= 1
            if n_leaves:
                n -= 1
            if x1_leaves:
                x1 -= 1
        if x1 <= n <= x2:
            ok += 1
        upper_eq = upper_eq and n == x2
        lower_eq = lower_eq and n == x1
    frac = ok / events if events else 1.0
    return DominanceReport(events, frac, ok == events, upper_eq, lower_eq, (z, x1, n, x2))


@dataclass(frozen=True)
class FiniteSystemStats:
    K: int
    N: int
    horizon: float
    seed: int | None
    distribution: np.ndarray = field(repr=False)
    mean_occupancy: float
    occupancy_halfwidth: float
    payoff_samples: np.ndarray = field(repr=False)
    payoff_mean: float
    payoff_halfwidth: float
    conserved: bool
    events: int


def simulate_finite_system(K: int, params: ModelParams, resource: ResourceProcess,
                           strategy: Strategy, horizon: float, seed=None, *,
                           sharing: SharingFunction | None = None, warmup: float | None = None,
                           cutoff: float | None = None) -> FiniteSystemStats:
    """Event simulation of N = round(beta K) agents moving among K locations.

    At each own epoch an agent collects F(z, n), stays with probability
    xi(z, n) or moves to a uniformly drawn other location, and then leaves
    the system with probability 1 - gamma; a replacement joins a uniformly
    drawn location. Each surviving switch opens a payoff sample: the sum of
    the agent's payoffs from the next epoch until it leaves. Leaving
    realizes the discount, so the samples are not discounted again.

    Samples open between ``warmup`` and ``horizon - cutoff``; the
    distribution averages over time after ``warmup`` and over locations.
    """
    if K < 2:
        raise InvalidSystem(f"need at least two locations, got K={K}")
    lam, g = params.lam, params.gamma
    life = 1.0 / (lam * (1.0 - g))
    warmup = 10.0 * life if warmup is None else warmup
    cutoff = 15.0 * life if cutoff is None else cutoff
    N = int(round(params.beta * K))
    rng = np.random.default_rng(seed)
    u = _Uniforms(rng)
    nz = resource.size
    rates = np.asarray(resource.rates).tolist()
    exits = resource.exit_rates.tolist()
    xi = _StayLookup(strategy, strategy.L + 1)
    pay = sharing.values(max(strategy.L, 1) + 4 * N // K + 64) if sharing is not None else None
    Fv = pay.tolist() if pay is not None else None
    n_max = len(Fv[0]) if Fv is not None else None

    zs = [_choice(u(), resource.stationary) for _ in range(K)]
    where = [int(u() * K) for _ in range(N)]
    counts = [0] * K
    for k in where:
        counts[k] += 1
    cum = [0.0] * N          # lifetime payoff so far
    open_at = [[] for _ in range(N)]  # cum values at each open switch sample
    samples = []

    width = max(max(counts) + 1, 4 * N // K + 64)
    cell_time = np.zeros((nz, width))
    cell_count = np.zeros((nz, width), dtype=np.int64)
    cell_last = np.full((nz, width), warmup)
    for k in range(K):
        cell_count[zs[k], counts[k]] += 1

    def move(k, z_old, n_old, z_new, n_new, t):
        nonlocal cell_time, cell_count, cell_last
        if n_new >= cell_time.shape[1]:
            pad = cell_time.shape[1]
            cell_time = np.hstack([cell_time, np.zeros((nz, pad))])
            cell_count = np.hstack([cell_count, np.zeros((nz, pad), dtype=np.int64)])
            cell_last = np.hstack([cell_last, np.full((nz, pad), max(t, warmup))])
        now = max(t, warmup)
        for zz, nn, d in ((z_old, n_old, -1), (z_new, n_new, 1)):
            cell_time[zz, nn] += cell_count[zz, nn] * (now - cell_last[zz, nn])
            cell_last[zz, nn] = now
            cell_count[zz, nn] += d

    loc_time = [0.0] * K
    loc_last = [warmup] * K

    def touch(k, t):
        now = max(t, warmup)
        loc_time[k] += counts[k] * (now - loc_last[k])
        loc_last[k] = now

    flip_total = sum(exits[z] for z in zs)
    t = 0.0
    events = 0
    conserved = True
    open_until = horizon - cutoff
    while True:
        total = flip_total + lam * N
        t += u.exp(total)
        if t >= horizon:
            break
        events += 1
        if u() * total < flip_total:
            # resource flip at a location chosen by its exit rate
            r = u() * flip_total
            acc = 0.0
            for k in range(K):
                acc += exits[zs[k]]
                if r < acc:
                    break
            z = zs[k]
            row = rates[z]
            r2 = u() * exits[z]
            acc = 0.0
            for y in range(nz):
                if y != z:
                    acc += row[y]
                    if r2 < acc:
                        break
            move(k, z, counts[k], y, counts[k], t)
            flip_total += exits[y] - exits[z]
            zs[k] = y
            continue
        i = int(u() * N)
        k = where[i]
        z, n = zs[k], counts[k]
        if Fv is not None:
            cum[i] += Fv[z][n - 1] if n <= n_max else Fv[z][-1]
        stays = u() < xi(z, n)
        survives = u() < g
        if not stays:
            dest = int(u() * (K - 1))
            if dest >= k:
                dest += 1
        else:
            dest = k
        if not survives:
            for c0 in open_at[i]:
                samples.append(cum[i] - c0)
            open_at[i] = []
            cum[i] = 0.0
            dest = int(u() * K)
        elif not stays and warmup <= t <= open_until:
            open_at[i].append(cum[i])
        if dest != k:
            touch(k, t)
            touch(dest, t)
            move(k, z, counts[k], z, counts[k] - 1, t)
            counts[k] -= 1
            move(dest, zs[dest], counts[dest], zs[dest], counts[dest] + 1, t)
            counts[dest] += 1
            where[i] = dest
        if events % 1024 == 0:
            conserved = conserved and sum(counts) == N
    conserved = conserved and sum(counts) == N
    for k in range(K):
        touch(k, horizon)
    # samples still open at the horizon are kept with the payoff realized so far
    for i in range(N):
        for c0 in open_at[i]:
            samples.append(cum[i] - c0)

    now = max(horizon, warmup)
    cell_time += cell_count * (now - cell_last)
    span = horizon - warmup
    if span > 0 and cell_time.sum() > 0:
        dist = cell_time / cell_time.sum()
        # per-location time averages; batches group locations
        per_loc = np.array(loc_time) / span
        mean = float(per_loc.mean())
        occ_hw = batch_halfwidth([b.mean() for b in np.array_split(per_loc, min(N_BATCHES, K))])
    else:
        dist = np.zeros_like(cell_time)
        mean = occ_hw = math.nan
    samples = np.asarray(samples, dtype=float)
    if samples.size:
        batches = np.array_split(samples, N_BATCHES) if samples.size >= N_BATCHES else []
        hw = batch_halfwidth([b.mean() for b in batches]) if len(batches) else math.nan
        pmean = float(samples.mean())
    else:
        hw = pmean = math.nan
    return FiniteSystemStats(K, N, horizon, seed, dist, mean, occ_hw, samples, pmean, hw,
                             conserved, events)
