"""Domain types, welfare objectives, validation, and prediction-error models.

Everything here is a pure function over immutable data; the rest of the
package builds on these primitives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Row sums of an allocation may deviate from their target by at most this.
EPS_ROW = 1e-9
# Default relative tolerance for welfare comparisons.
REL_TOL = 1e-7

PREDICTION_MODES = ("exact", "over", "under", "random-log-uniform")


class ValidationError(ValueError):
    """Rejected input or configuration (maps to CLI exit code 2)."""


class InvariantViolation(RuntimeError):
    """A runtime invariant failed mid-computation (maps to CLI exit code 3)."""


# ---------------------------------------------------------------------------
# instance data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueMatrix:
    """Per-round, per-agent nonnegative values: ``values[t, i]`` is agent i's
    per-unit value for the round-t item."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"value matrix must be 2-D and nonempty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("value matrix contains non-finite entries")
        if (arr < 0).any():
            t, i = np.argwhere(arr < 0)[0]
            raise ValidationError(f"negative value at round {t}, agent {i}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def num_rounds(self) -> int:
        return self.values.shape[0]

    @property
    def num_agents(self) -> int:
        return self.values.shape[1]


def monopolist_values(values: ValueMatrix) -> np.ndarray:
    """Total value each agent would get if handed every item: V_i = sum_t v_{i,t}."""
    return values.values.sum(axis=0)


def require_positive_monopolists(values: ValueMatrix) -> np.ndarray:
    """Return V, rejecting instances where any agent values nothing.

    Agents with V_i = 0 make ratio objectives meaningless (their optimal
    utility is 0), so they are rejected up front with the offenders named.
    """
    v = monopolist_values(values)
    if (v <= 0).any():
        bad = np.flatnonzero(v <= 0).tolist()
        raise ValidationError(f"agents with zero monopolist value not supported: {bad}")
    return v


def validate_allocation(alloc: np.ndarray, num_rounds: int | None = None,
                        num_agents: int | None = None) -> np.ndarray:
    """Check an allocation matrix: nonnegative entries, row sums in [0, 1 + EPS_ROW]."""
    arr = np.asarray(alloc, dtype=float)
    if arr.ndim != 2:
        raise ValidationError(f"allocation must be 2-D, got shape {arr.shape}")
    if num_rounds is not None and arr.shape[0] != num_rounds:
        raise ValidationError(f"allocation has {arr.shape[0]} rounds, expected {num_rounds}")
    if num_agents is not None and arr.shape[1] != num_agents:
        raise ValidationError(f"allocation has {arr.shape[1]} agents, expected {num_agents}")
    if not np.isfinite(arr).all():
        raise ValidationError("allocation contains non-finite entries")
    if (arr < 0).any():
        t, i = np.argwhere(arr < 0)[0]
        raise ValidationError(f"negative allocation at round {t}, agent {i}")
    sums = arr.sum(axis=1)
    if (sums > 1.0 + EPS_ROW).any():
        t = int(np.argmax(sums))
        raise ValidationError(f"round {t} allocates {sums[t]} > 1")
    return arr


# ---------------------------------------------------------------------------
# welfare objectives
# ---------------------------------------------------------------------------


def utilities(values: ValueMatrix, alloc: np.ndarray) -> np.ndarray:
    """u_i = sum_t v_{i,t} * x_{i,t}."""
    arr = np.asarray(alloc, dtype=float)
    if arr.shape != values.values.shape:
        raise ValidationError(
            f"allocation shape {arr.shape} does not match values {values.values.shape}")
    return np.einsum("ti,ti->i", values.values, arr)


def nsw(profile: np.ndarray) -> float:
    """Nash social welfare: the geometric mean (prod_i u_i)^(1/N).

    Computed in the log domain; a profile containing a zero has NSW exactly 0.
    """
    u = np.asarray(profile, dtype=float)
    if (u == 0).any():
        return 0.0
    return float(np.exp(np.log(u).mean()))


def maxmin(profile: np.ndarray) -> float:
    """Egalitarian welfare: min_i u_i."""
    return float(np.min(np.asarray(profile, dtype=float)))


def competitive_ratio(opt_value: float, alg_value: float) -> float:
    """opt/alg, with inf when the algorithm got zero and the optimum did not."""
    if opt_value < 0:
        raise ValidationError("optimal value must be nonnegative")
    if alg_value > 0:
        return opt_value / alg_value
    return math.inf if opt_value > 0 else 1.0


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionErrorSpec:
    """Multiplicative error model for monopolist-utility predictions.

    The prediction for agent i lies in [V_i / d_i, c_i * V_i] where
    c = over_factors and d = under_factors, all >= 1.
    """

    over_factors: np.ndarray
    under_factors: np.ndarray
    mode: str = "exact"
    seed: int = 0

    def __post_init__(self):
        c = np.atleast_1d(np.array(self.over_factors, dtype=float))
        d = np.atleast_1d(np.array(self.under_factors, dtype=float))
        if (c < 1).any() or (d < 1).any():
            raise ValidationError("prediction error factors must all be >= 1")
        if self.mode not in PREDICTION_MODES:
            raise ValidationError(f"unknown prediction mode {self.mode!r}")
        c.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "over_factors", c)
        object.__setattr__(self, "under_factors", d)

    @classmethod
    def exact(cls, num_agents: int) -> "PredictionErrorSpec":
        ones = np.ones(num_agents)
        return cls(ones, ones, "exact")

    @classmethod
    def over(cls, factor, num_agents: int) -> "PredictionErrorSpec":
        c = np.broadcast_to(np.asarray(factor, dtype=float), (num_agents,)).copy()
        return cls(c, np.ones(num_agents), "over")

    @classmethod
    def under(cls, factor, num_agents: int) -> "PredictionErrorSpec":
        d = np.broadcast_to(np.asarray(factor, dtype=float), (num_agents,)).copy()
        return cls(np.ones(num_agents), d, "under")

    @classmethod
    def random(cls, over_factor, under_factor, num_agents: int, seed: int) -> "PredictionErrorSpec":
        c = np.broadcast_to(np.asarray(over_factor, dtype=float), (num_agents,)).copy()
        d = np.broadcast_to(np.asarray(under_factor, dtype=float), (num_agents,)).copy()
        return cls(c, d, "random-log-uniform", seed)


def _broadcast_factors(factors: np.ndarray, n: int) -> np.ndarray:
    if factors.size == n:
        return factors
    if factors.size == 1:
        return np.full(n, float(factors[0]))
    raise ValidationError(f"expected {n} error factors, got {factors.size}")


def make_predictions(monopolist: np.ndarray, spec: PredictionErrorSpec) -> np.ndarray:
    """Generate predictions of the monopolist utilities under an error model.

    exact: V_i; over: c_i V_i; under: V_i / d_i; random-log-uniform: drawn
    log-uniformly from [V_i / d_i, c_i V_i], deterministic for a fixed seed.
    """
    v = np.asarray(monopolist, dtype=float)
    if (v <= 0).any():
        bad = np.flatnonzero(v <= 0).tolist()
        raise ValidationError(
            f"predictions require positive monopolist values; zero for agents {bad}")
    n = v.size
    c = _broadcast_factors(spec.over_factors, n)
    d = _broadcast_factors(spec.under_factors, n)
    if spec.mode == "exact":
        return v.copy()
    if spec.mode == "over":
        return c * v
    if spec.mode == "under":
        return v / d
    rng = np.random.default_rng(spec.seed)
    lo = np.log(v / d)
    hi = np.log(c * v)
    draw = np.exp(rng.uniform(lo, hi))
    # a draw at the upper log endpoint can round just past c*V
    return np.clip(draw, v / d, c * v)


def error_factors(monopolist: np.ndarray, predictions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smallest valid (c, d) for given predictions: c_i = max(1, P_i/V_i), d_i = max(1, V_i/P_i)."""
    v = np.asarray(monopolist, dtype=float)
    p = np.asarray(predictions, dtype=float)
    if (v <= 0).any() or (p <= 0).any():
        raise ValidationError("error factors need positive monopolist values and predictions")
    return np.maximum(1.0, p / v), np.maximum(1.0, v / p)
