"""Offline NSW oracle and price certificates.

The oracle solves the Eisenberg-Gale program max sum_i log u_i(x) over
per-round simplices by proportional-response dynamics on the equivalent
linear Fisher market with unit budgets, then sharpens the result with exact
per-round rebalancing. The stopping rule is self-certifying: feasible dual
prices p_t = max_i v_{i,t}/u_i bound NSW(opt)/NSW(x) by (1/N) sum_t p_t.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import ValidationError, ValueMatrix, nsw, require_positive_monopolists, utilities
from .online import PriceTrace, _fill_levels

EG_TOL = 1e-6
EG_MAX_ITERS = 100_000


@dataclass
class OracleResult:
    allocation: np.ndarray
    utilities: np.ndarray
    nsw_value: float
    duality_gap: float
    iterations: int
    certified: bool


# ---------------------------------------------------------------------------
# Eisenberg-Gale solver
# ---------------------------------------------------------------------------


def _certificate_gap(values: np.ndarray, u: np.ndarray) -> float:
    n = u.size
    return float((values / u[None, :]).max(axis=1).sum()) / n - 1.0


def eg_solve(values: ValueMatrix, tol: float = EG_TOL, max_iters: int = EG_MAX_ITERS) -> OracleResult:
    """NSW-optimal allocation with a certified duality gap.

    Proportional response: bids start at b_{i,t} = v_{i,t}/V_i, each item goes
    to bidders pro rata, and agents respend in proportion to utility received.
    Once the price certificate is within reach, per-round water-fill
    rebalancing (cyclic exact coordinate ascent, with extrapolation through
    slow share drains) finishes the job; the final gap is typically at
    floating-point level. Rounds nobody values are split uniformly.
    """
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    monopolist = require_positive_monopolists(values)
    V = values.values
    T, N = V.shape
    live = V.any(axis=1)
    Vl = np.ascontiguousarray(V[live])
    Tl = Vl.shape[0]

    switch_gap = max(tol, 1e-4)
    B = Vl / monopolist
    X = np.empty_like(B)
    p = np.empty(Tl)
    ratios = np.empty_like(B)
    u = np.empty(N)
    iterations = 0
    while iterations < max_iters:
        iterations += 1
        B.sum(axis=1, out=p)
        np.divide(B, p[:, None], out=X)
        u = np.einsum("ti,ti->i", Vl, X)
        if iterations == 1 or iterations % 4 == 0:
            if _certificate_gap(Vl, u) <= switch_gap:
                break
        np.multiply(Vl, X, out=B)
        B /= u[None, :]

    # exact rebalancing: each step re-splits one round optimally against the
    # other rounds' running utilities
    z = np.empty(N)
    X_prev = np.empty_like(X)
    moved_prev = np.inf
    passes = 0
    while iterations + passes < max_iters + 50_000:
        passes += 1
        X_prev[:] = X
        moved = 0.0
        for t in range(Tl):
            vt = Vl[t]
            xt = X[t]
            contrib = vt * xt
            bases = np.maximum(u - contrib, 0.0)
            _fill_levels(bases, vt, 1.0, z)
            delta = vt * z - contrib
            u += delta
            m = (np.abs(delta) / u).max()
            if m > moved:
                moved = m
            xt[:] = z
        if moved <= 1e-13:
            break
        if passes > 2 and moved > 1e-12 and 0.97 * moved_prev < moved <= moved_prev:
            # steady drain: a share is leaking linearly toward zero through a
            # cycle of rounds; jump along the linear trajectory
            D = X - X_prev
            draining = D < -1e-15
            if draining.any():
                steps = int(np.floor((X[draining] / -D[draining]).min()))
                if steps >= 2:
                    obj_before = np.log(u).sum()
                    X_try = np.maximum(X + (steps - 1) * D, 0.0)
                    u_try = np.einsum("ti,ti->i", Vl, X_try)
                    if (u_try > 0).all() and np.log(u_try).sum() >= obj_before - 1e-9 * max(1.0, abs(obj_before)):
                        X[:] = X_try
                        u = u_try
                        moved = np.inf
        moved_prev = moved

    u = np.einsum("ti,ti->i", Vl, X)
    gap = _certificate_gap(Vl, u)
    allocation = np.full((T, N), 1.0 / N)
    allocation[live] = X
    return OracleResult(
        allocation=allocation,
        utilities=u,
        nsw_value=nsw(u),
        duality_gap=gap,
        iterations=iterations + passes,
        certified=gap <= tol,
    )


# ---------------------------------------------------------------------------
# brute-force oracle for tiny instances
# ---------------------------------------------------------------------------

_BRUTE_MAX_AGENTS = 3
_BRUTE_MAX_ROUNDS = 4
_BRUTE_MAX_POINTS = 5_000_000


def _simplex_grid(num_agents: int, resolution: float) -> np.ndarray:
    """All rows of the N-simplex on a grid of the given resolution."""
    steps = int(round(1.0 / resolution))
    if abs(steps * resolution - 1.0) > 1e-12:
        raise ValidationError("grid resolution must divide 1")
    if num_agents == 1:
        return np.ones((1, 1))
    if num_agents == 2:
        a = np.arange(steps + 1) / steps
        return np.column_stack([a, 1.0 - a])
    rows = []
    for i in range(steps + 1):
        for j in range(steps + 1 - i):
            rows.append((i / steps, j / steps, (steps - i - j) / steps))
    return np.array(rows)


def brute_force_nsw(values: ValueMatrix, grid_resolution: float) -> OracleResult:
    """Exhaustive grid search over per-round simplices; the independent oracle
    for tiny instances (N <= 3, T <= 4)."""
    T, N = values.num_rounds, values.num_agents
    if N > _BRUTE_MAX_AGENTS or T > _BRUTE_MAX_ROUNDS:
        raise ValidationError(
            f"brute force limited to N <= {_BRUTE_MAX_AGENTS}, T <= {_BRUTE_MAX_ROUNDS}")
    grid = _simplex_grid(N, grid_resolution)
    K = grid.shape[0]
    if K ** T > _BRUTE_MAX_POINTS:
        raise ValidationError(f"grid of {K}^{T} points exceeds the enumeration limit")
    V = values.values
    # accumulate utilities over the Cartesian product of per-round grid rows
    U = np.zeros((1, N))
    for t in range(T):
        contrib = grid * V[t][None, :]
        U = (U[:, None, :] + contrib[None, :, :]).reshape(-1, N)
    with np.errstate(divide="ignore"):
        scores = np.where((U > 0).all(axis=1), np.log(np.maximum(U, 1e-300)).sum(axis=1), -np.inf)
    best = int(np.argmax(scores))
    # decode the flat index back into one grid row per round
    alloc = np.empty((T, N))
    idx = best
    for t in range(T - 1, -1, -1):
        alloc[t] = grid[idx % K]
        idx //= K
    u = utilities(values, alloc)
    if (u > 0).all():
        _, bound = dual_certificate(values, alloc)
        gap = bound - 1.0
    else:
        gap = np.inf
    return OracleResult(
        allocation=alloc,
        utilities=u,
        nsw_value=nsw(u),
        duality_gap=gap,
        iterations=K ** T,
        certified=True,
    )


# ---------------------------------------------------------------------------
# price certificates
# ---------------------------------------------------------------------------


def _geom_mean(factors: np.ndarray | None, n: int) -> float:
    if factors is None:
        return 1.0
    c = np.asarray(factors, dtype=float)
    if c.size == 1:
        c = np.full(n, float(c))
    if c.size != n:
        raise ValidationError(f"expected {n} over-factors, got {c.size}")
    if (c < 1).any():
        raise ValidationError("over-factors must be >= 1")
    return float(np.exp(np.log(c).mean()))


def dual_certificate(values: ValueMatrix, alloc: np.ndarray,
                     over_factors: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Minimal feasible prices p_t = max_i v_{i,t}/(c_i u_i) and the certified
    ratio bound NSW(opt)/NSW(alloc) <= (prod c_i)^{1/N} (sum_t p_t)/N."""
    u = utilities(values, alloc)
    if (u <= 0).any():
        bad = np.flatnonzero(u <= 0).tolist()
        raise ValidationError(f"dual certificate undefined: zero utility for agents {bad}")
    n = u.size
    c = np.ones(n) if over_factors is None else np.asarray(over_factors, dtype=float)
    if c.size == 1:
        c = np.full(n, float(c))
    prices = (values.values / (c * u)[None, :]).max(axis=1)
    bound = _geom_mean(c, n) * float(prices.sum()) / n
    return prices, bound


def predicted_price_certificate(trace: PriceTrace | np.ndarray,
                                over_factors: np.ndarray | None,
                                num_agents: int) -> float:
    """Ratio bound (prod c_i)^{1/N} (sum_t p~_t)/N from a set-aside greedy
    price trace; predicted prices dominate the minimal feasible prices, so
    this is a valid (weaker) certificate computable online."""
    prices = trace.prices if isinstance(trace, PriceTrace) else np.asarray(trace, dtype=float)
    return _geom_mean(over_factors, num_agents) * float(prices.sum()) / num_agents
