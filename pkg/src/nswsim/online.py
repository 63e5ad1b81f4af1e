"""Online allocators: uniform, proportional rules, myopic greedy, and
set-aside greedy, plus the water-filling inner solver they share.

Each round brings one divisible item; an allocator maps the round's value
vector (and its own state) to a row of the allocation matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import EPS_ROW, InvariantViolation, ValidationError

ALLOCATOR_KINDS = (
    "uniform",
    "proportional",
    "normalized-proportional",
    "myopic-greedy",
    "set-aside-greedy",
)

PREDICTION_USERS = ("normalized-proportional", "set-aside-greedy")


# ---------------------------------------------------------------------------
# water-filling
# ---------------------------------------------------------------------------


def _fill_levels(bases: np.ndarray, values: np.ndarray, budget: float, out: np.ndarray) -> None:
    """Unchecked water-fill core; writes the allocation into ``out``.

    Levels are w_i = bases_i / values_i for agents with positive value; the
    budget raises the lowest levels to a common water level. Stable sort keeps
    tie-breaking by lowest agent index.
    """
    out[:] = 0.0
    idx = np.flatnonzero(values > 0)
    if idx.size == 0:
        return
    w = bases[idx] / values[idx]
    order = np.argsort(w, kind="stable")
    ws = w[order]
    m = ws.size
    # cost to equalize the first j levels at ws[j]; accumulate guards against
    # one-ulp non-monotonicity under exact level ties
    costs = np.arange(m) * ws
    if m > 1:
        costs[1:] -= np.cumsum(ws)[:-1]
    np.maximum.accumulate(costs, out=costs)
    j = int(np.searchsorted(costs, budget, side="right")) - 1
    count = j + 1
    level = ws[j] + (budget - costs[j]) / count
    fill = np.maximum(level - ws[:count], 0.0)
    out[idx[order[:count]]] = fill


def waterfill(bases: np.ndarray, values: np.ndarray, budget: float,
              allow_zero_bases: bool = False) -> np.ndarray:
    """Maximize sum_i log(bases_i + values_i * z_i) s.t. sum z_i <= budget, z >= 0.

    Agents with zero value receive nothing; if every value is zero the budget
    is left unallocated and the zero vector is returned. With
    ``allow_zero_bases`` an agent may have base 0 together with a positive
    value (its level is 0 and it is filled first); otherwise that is a fatal
    invariant violation. Runs in O(N log N) per call.
    """
    b = np.asarray(bases, dtype=float)
    v = np.asarray(values, dtype=float)
    if b.shape != v.shape or b.ndim != 1:
        raise ValidationError(f"bases and values must be equal-length vectors, "
                              f"got {b.shape} and {v.shape}")
    if not (np.isfinite(budget) and budget > 0):
        raise ValidationError(f"budget must be positive, got {budget}")
    if (v < 0).any() or not np.isfinite(v).all():
        raise ValidationError("values must be finite and nonnegative")
    pos = v > 0
    floor = 0.0 if allow_zero_bases else None
    if floor is None:
        if (b[pos] <= 0).any():
            bad = np.flatnonzero(pos & (b <= 0)).tolist()
            raise InvariantViolation(f"nonpositive base for valued agents {bad}")
    elif (b[pos] < 0).any():
        bad = np.flatnonzero(pos & (b < 0)).tolist()
        raise InvariantViolation(f"negative base for valued agents {bad}")
    z = np.empty_like(b)
    _fill_levels(b, v, float(budget), z)
    return z


@dataclass
class KKTReport:
    ok: bool
    max_ratio: float
    violations: list = field(default_factory=list)  # (agent, ratio, relative deviation)


def kkt_check(bases: np.ndarray, values: np.ndarray, z: np.ndarray,
              tol: float = 1e-9) -> KKTReport:
    """Check water-fill optimality: every allocated agent's ratio
    v_i / (bases_i + v_i z_i) equals the max ratio within relative ``tol``."""
    b = np.asarray(bases, dtype=float)
    v = np.asarray(values, dtype=float)
    zz = np.asarray(z, dtype=float)
    denom = b + v * zz
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(v > 0, v / denom, 0.0)
    max_ratio = float(ratios.max()) if ratios.size else 0.0
    violations = []
    for i in np.flatnonzero(zz > 0):
        dev = (max_ratio - ratios[i]) / max_ratio if max_ratio > 0 else 0.0
        if not (ratios[i] >= max_ratio * (1.0 - tol)):
            violations.append((int(i), float(ratios[i]), float(dev)))
    return KKTReport(ok=not violations, max_ratio=max_ratio, violations=violations)


# ---------------------------------------------------------------------------
# per-round allocation rules
# ---------------------------------------------------------------------------


def uniform_step(num_agents: int, values: np.ndarray | None = None,
                 over: str = "all") -> np.ndarray:
    """Uniform split: 1/N to everyone, or with ``over='nonzero'`` an equal
    split among the agents valuing this round (all agents if none do)."""
    if num_agents < 1:
        raise ValidationError("need at least one agent")
    if over not in ("all", "nonzero"):
        raise ValidationError(f"unknown uniform variant {over!r}")
    if over == "nonzero" and values is not None:
        v = np.asarray(values, dtype=float)
        mask = v > 0
        k = int(mask.sum())
        if k > 0:
            row = np.zeros(num_agents)
            row[mask] = 1.0 / k
            return row
    return np.full(num_agents, 1.0 / num_agents)


def proportional_step(values: np.ndarray, predictions: np.ndarray | None = None) -> np.ndarray:
    """x_i = (v_i / P_i) / sum_j (v_j / P_j); plain proportional when no
    predictions are given. Falls back to uniform on an all-zero round."""
    v = np.asarray(values, dtype=float)
    if predictions is None:
        weights = v.copy()
    else:
        p = np.asarray(predictions, dtype=float)
        if (p <= 0).any():
            raise ValidationError("proportional weights need positive predictions")
        weights = v / p
    total = weights.sum()
    if total <= 0:
        return np.full(v.size, 1.0 / v.size)
    return weights / total


def myopic_greedy_step(accrued: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Allocate the whole item to maximize end-of-round NSW given utilities
    accrued so far. Agents at zero accrued utility sit at water level 0 and
    are filled first; on an all-zero round nothing is allocated."""
    acc = np.asarray(accrued, dtype=float)
    if (acc < 0).any():
        raise ValidationError("accrued utilities must be nonnegative")
    return waterfill(acc, values, 1.0, allow_zero_bases=True)


# ---------------------------------------------------------------------------
# set-aside greedy
# ---------------------------------------------------------------------------


@dataclass
class SetAsideState:
    """Running state: prediction bases b_i = P_i/(2N) plus greedy-half accrued
    utility g_i; the predicted utility entering round t is b_i + g_i."""

    bases: np.ndarray
    greedy_accrued: np.ndarray
    round_index: int = 0

    @classmethod
    def start(cls, predictions: np.ndarray) -> "SetAsideState":
        p = np.asarray(predictions, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValidationError("predictions must be a nonempty vector")
        if (p <= 0).any() or not np.isfinite(p).all():
            raise ValidationError("set-aside greedy needs strictly positive predictions")
        n = p.size
        return cls(bases=p / (2.0 * n), greedy_accrued=np.zeros(n), round_index=0)

    @property
    def num_agents(self) -> int:
        return self.bases.size

    def predicted_utilities(self) -> np.ndarray:
        return self.bases + self.greedy_accrued


@dataclass
class RoundDecision:
    """One round of set-aside greedy: y (set-aside half), z (greedy half),
    their sum x, and the predicted price of the round."""

    set_aside: np.ndarray
    greedy: np.ndarray
    total: np.ndarray
    predicted_price: float
    predicted_before: np.ndarray  # b + g entering the round
    predicted_after: np.ndarray   # b + g + v*z after the greedy half


def set_aside_greedy_step(state: SetAsideState, values: np.ndarray) -> tuple[RoundDecision, SetAsideState]:
    """One round: set aside 1/(2N) per agent, water-fill the other half
    against predicted utilities, and record the predicted price
    max_{i: v_i > 0} v_i / (b_i + g_i + v_i z_i).

    Never reads the horizon T. On an all-zero round the greedy half stays
    unallocated and the price is 0.
    """
    v = np.asarray(values, dtype=float)
    n = state.num_agents
    if v.shape != (n,):
        raise ValidationError(f"expected {n} values, got shape {v.shape}")
    before = state.predicted_utilities()
    z = waterfill(before, v, 0.5)
    after = before + v * z
    pos = v > 0
    price = float((v[pos] / after[pos]).max()) if pos.any() else 0.0
    y = np.full(n, 1.0 / (2.0 * n))
    decision = RoundDecision(
        set_aside=y,
        greedy=z,
        total=y + z,
        predicted_price=price,
        predicted_before=before,
        predicted_after=after,
    )
    new_state = SetAsideState(
        bases=state.bases,
        greedy_accrued=state.greedy_accrued + v * z,
        round_index=state.round_index + 1,
    )
    return decision, new_state


def round_lemma_bound(decision: RoundDecision) -> float:
    """Per-round price bound 2 * sum_i [ln u~_i(z) - ln u~_i(0)]."""
    return 2.0 * float(np.sum(np.log(decision.predicted_after)
                              - np.log(decision.predicted_before)))


# ---------------------------------------------------------------------------
# stateful allocator wrappers
# ---------------------------------------------------------------------------


@dataclass
class PriceTrace:
    """Per-round set-aside greedy trace: predicted prices plus the predicted
    utilities before/after each greedy half, for the dual certificate and the
    per-round lemma checks."""

    prices: np.ndarray
    predicted_before: np.ndarray  # T x N
    predicted_after: np.ndarray   # T x N
    greedy: np.ndarray            # T x N semi-allocations z
    set_aside: np.ndarray         # T x N semi-allocations y


class OnlineAllocator:
    """Feeds one value row per round; owns whatever per-run state it needs."""

    uses_predictions = False

    def __init__(self, num_agents: int):
        self.num_agents = num_agents

    def step(self, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class UniformAllocator(OnlineAllocator):
    def __init__(self, num_agents: int, over: str = "all"):
        super().__init__(num_agents)
        if over not in ("all", "nonzero"):
            raise ValidationError(f"unknown uniform variant {over!r}")
        self.over = over

    def step(self, values: np.ndarray) -> np.ndarray:
        return uniform_step(self.num_agents, values, over=self.over)


class ProportionalAllocator(OnlineAllocator):
    """Plain proportional when built without predictions, the normalized
    proportional rule otherwise."""

    def __init__(self, num_agents: int, predictions: np.ndarray | None = None):
        super().__init__(num_agents)
        self.predictions = None if predictions is None else np.asarray(predictions, dtype=float)
        self.uses_predictions = predictions is not None

    def step(self, values: np.ndarray) -> np.ndarray:
        return proportional_step(values, self.predictions)


class MyopicGreedyAllocator(OnlineAllocator):
    def __init__(self, num_agents: int):
        super().__init__(num_agents)
        self.accrued = np.zeros(num_agents)

    def step(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        row = myopic_greedy_step(self.accrued, v)
        self.accrued = self.accrued + v * row
        return row


class SetAsideGreedyAllocator(OnlineAllocator):
    uses_predictions = True

    def __init__(self, predictions: np.ndarray):
        state = SetAsideState.start(predictions)
        super().__init__(state.num_agents)
        self.state = state
        self.decisions: list[RoundDecision] = []

    def step(self, values: np.ndarray) -> np.ndarray:
        decision, self.state = set_aside_greedy_step(self.state, values)
        self.decisions.append(decision)
        return decision.total

    def trace(self) -> PriceTrace:
        return PriceTrace(
            prices=np.array([d.predicted_price for d in self.decisions]),
            predicted_before=np.array([d.predicted_before for d in self.decisions]),
            predicted_after=np.array([d.predicted_after for d in self.decisions]),
            greedy=np.array([d.greedy for d in self.decisions]),
            set_aside=np.array([d.set_aside for d in self.decisions]),
        )


def make_allocator(kind: str, num_agents: int, predictions: np.ndarray | None = None,
                   uniform_over: str = "all") -> OnlineAllocator:
    if kind not in ALLOCATOR_KINDS:
        raise ValidationError(f"unknown allocator {kind!r}; choose from {ALLOCATOR_KINDS}")
    if kind in PREDICTION_USERS and predictions is None:
        raise ValidationError(f"{kind} requires predictions")
    if predictions is not None and np.asarray(predictions).size != num_agents:
        raise ValidationError(f"expected {num_agents} predictions, "
                              f"got {np.asarray(predictions).size}")
    if kind == "uniform":
        return UniformAllocator(num_agents, over=uniform_over)
    if kind == "proportional":
        return ProportionalAllocator(num_agents)
    if kind == "normalized-proportional":
        return ProportionalAllocator(num_agents, predictions)
    if kind == "myopic-greedy":
        return MyopicGreedyAllocator(num_agents)
    return SetAsideGreedyAllocator(predictions)
