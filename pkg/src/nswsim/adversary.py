"""Instance generators for the hardness families, static and adaptive.

Static generators return a ValueMatrix (plus analytic reference values where
they exist). Adaptive adversaries implement a round protocol: the first
``next_values(None)`` reveals round 1; each later call receives the previous
round's allocation row and reveals the next round, or returns None at the
end. Afterward the realized matrix and the event log are available.

Remainder payouts are computed as 1 minus exact running sums so that the
normalized families realize V_i = 1 bit-tight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import EPS_ROW, InvariantViolation, ValidationError, ValueMatrix


def _int_sqrt(n: int, what: str) -> int:
    root = math.isqrt(n)
    if root * root != n:
        raise ValidationError(f"{what} requires a perfect-square agent count, got {n}")
    return root


def random_instance(num_agents: int, num_rounds: int, seed: int,
                    sparsity: float = 0.3) -> ValueMatrix:
    """Values i.i.d. uniform[0,1], each zeroed with the given probability;
    redrawn until every agent has a positive monopolist value."""
    if num_agents < 1 or num_rounds < 1:
        raise ValidationError("need at least one agent and one round")
    rng = np.random.default_rng(seed)
    while True:
        v = rng.uniform(size=(num_rounds, num_agents))
        v[rng.uniform(size=v.shape) < sparsity] = 0.0
        if (v.sum(axis=0) > 0).all():
            return ValueMatrix(v)


# ---------------------------------------------------------------------------
# static families
# ---------------------------------------------------------------------------


def gen_mw_hardness(num_agents: int, seed: int = 0) -> tuple[ValueMatrix, float, float]:
    """Maxmin hardness family: sqrt(N) groups of sqrt(N) agents, one hidden
    special agent per group, all values in {0, 1/2}.

    Each epoch opens with the whole group valuing the item, then every
    non-special member resolves solo; the special agents all clash in the one
    final round. Returns the matrix plus the analytic offline maxmin
    1/2 + 1/(2N) and the symmetric-online maxmin 1/sqrt(N).
    """
    root = _int_sqrt(num_agents, "mw-hardness")
    rng = np.random.default_rng(seed)
    T = num_agents + 1
    v = np.zeros((T, num_agents))
    specials = []
    for g in range(root):
        members = list(range(g * root, (g + 1) * root))
        special = int(rng.choice(members))
        specials.append(special)
        first = g * root
        v[first, members] = 0.5
        r = first + 1
        for agent in members:
            if agent != special:
                v[r, agent] = 0.5
                r += 1
    v[num_agents, specials] = 0.5
    offline_mw = 0.5 + 0.5 / num_agents
    online_mw = 1.0 / root
    return ValueMatrix(v), offline_mw, online_mw


def gen_proportional_killer(num_agents: int) -> ValueMatrix:
    """T = N; the matching agent values round t at 1/sqrt(N), everyone else at
    (1 - 1/sqrt(N))/(N-1). Rows and columns all sum to 1."""
    if num_agents == 1:
        raise ValidationError("proportional killer needs N >= 4 (off-diagonal undefined at N=1)")
    root = _int_sqrt(num_agents, "proportional-killer")
    diag = 1.0 / root
    off = (1.0 - diag) / (num_agents - 1)
    v = np.full((num_agents, num_agents), off)
    np.fill_diagonal(v, diag)
    return ValueMatrix(v)


def gen_myopic_killer(num_agents: int) -> ValueMatrix:
    """T = N^2; agent i is active with value about 1/N in rounds
    ((i-1)N, iN], while not-yet-active agents carry the geometrically growing
    background value 1/N^(N^2 - t + 1). Active values are shaved so every
    column sums to exactly 1."""
    n = num_agents
    if not 2 <= n <= 12:
        raise ValidationError(
            "myopic killer supports 2 <= N <= 12; beyond that the background "
            "values underflow double precision")
    T = n * n
    t = np.arange(1, T + 1)
    background = np.power(float(n), t.astype(float) - (T + 1))  # 1/N^(N^2 - t + 1)
    v = np.zeros((T, n))
    for i in range(n):
        lo = i * n  # first active round, 0-based
        prior = background[:lo].sum()
        v[:lo, i] = background[:lo]
        v[lo:lo + n, i] = (1.0 - prior) / n
    return ValueMatrix(v)


# ---------------------------------------------------------------------------
# adaptive adversaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdversaryEvent:
    round_index: int  # 1-based round whose allocation triggered the event
    kind: str         # "freeze" | "banish" | "clear" | "clash"
    agent: int


class AdaptiveAdversary:
    """Base protocol: next_values(prev_row) -> value row or None at the end.

    Subclasses write their construction as a generator (``_script``) that
    yields value rows and receives the allocation row the algorithm chose.
    """

    def __init__(self, num_agents: int):
        self.num_agents = num_agents
        self.events: list[AdversaryEvent] = []
        self.rounds_issued = 0
        self._rows: list[np.ndarray] = []
        self._gen = None
        self._finished = False

    def _script(self):
        raise NotImplementedError

    def next_values(self, prev_alloc: np.ndarray | None = None) -> np.ndarray | None:
        if self._finished:
            return None
        if self._gen is None:
            if prev_alloc is not None:
                raise ValidationError("the first call must pass no allocation")
            self._gen = self._script()
            try:
                row = next(self._gen)
            except StopIteration:
                self._finished = True
                return None
        else:
            if prev_alloc is None:
                raise ValidationError("an allocation row is required after the first round")
            arr = np.asarray(prev_alloc, dtype=float)
            if arr.shape != (self.num_agents,):
                raise ValidationError(f"expected an allocation row of length {self.num_agents}")
            if (arr < 0).any() or arr.sum() > 1.0 + EPS_ROW:
                raise ValidationError("allocation row must be nonnegative and sum to at most 1")
            try:
                row = self._gen.send(arr)
            except StopIteration:
                self._finished = True
                return None
        out = np.asarray(row, dtype=float)
        self._rows.append(out)
        self.rounds_issued += 1
        return out

    @property
    def finished(self) -> bool:
        return self._finished

    def realized(self) -> ValueMatrix:
        if not self._finished:
            raise InvariantViolation("adversary run is not complete")
        return ValueMatrix(np.array(self._rows))

    def _event(self, kind: str, agent: int) -> None:
        self.events.append(AdversaryEvent(self.rounds_issued, kind, int(agent)))


def _smallest_index(allocation: np.ndarray, candidates: np.ndarray) -> int:
    """Candidate with the smallest share, ties to the lowest agent index."""
    shares = allocation[candidates]
    return int(candidates[int(np.argmin(shares))])  # argmin takes the first minimum


class MWAdaptiveAdversary(AdaptiveAdversary):
    """Adaptive maxmin construction: a symmetric opening round, then the
    sqrt(N) agents shortchanged in it clash over one final item while everyone
    else cashes out solo. Realizes V_i = 1 for every agent."""

    def __init__(self, num_agents: int):
        if num_agents < 4 or num_agents % 2 != 0:
            raise ValidationError("adaptive MW family needs an even perfect square N >= 4")
        self.root = _int_sqrt(num_agents, "adaptive MW family")
        super().__init__(num_agents)
        self.clashing: list[int] = []
        self.analytic_mw_opt = 1.0 / self.root

    def _script(self):
        n = self.num_agents
        seen = np.zeros(n)
        row = np.full(n, 1.0 - 1.0 / self.root)
        seen += row
        alloc = yield row
        # at least N/2 agents received < 2/N; take the sqrt(N) smallest
        order = np.argsort(alloc, kind="stable")
        chosen = sorted(int(a) for a in order[: self.root])
        if (alloc[chosen] >= 2.0 / n).any():
            raise InvariantViolation("pigeonhole failed: a chosen agent received >= 2/N")
        self.clashing = chosen
        for agent in chosen:
            self._event("clash", agent)
        solo = [i for i in range(n) if i not in set(chosen)]
        for agent in solo:
            row = np.zeros(n)
            row[agent] = 1.0 - seen[agent]
            seen[agent] = 1.0
            yield row
        row = np.zeros(n)
        for agent in chosen:
            row[agent] = 1.0 - seen[agent]
        yield row


class UnscaledAdversary(AdaptiveAdversary):
    """No-information hardness: everyone opens at value 1, then whichever
    agent got the least is frozen out while survivors' values blow up by 1/eps
    each round. Utilities are left unnormalized by design."""

    def __init__(self, num_agents: int, epsilon: float):
        if num_agents < 2:
            raise ValidationError("unscaled family needs N >= 2")
        if not 0 < epsilon < 1:
            raise ValidationError("epsilon must lie in (0, 1)")
        if not np.isfinite((1.0 / epsilon) ** num_agents):
            raise ValidationError(f"1/epsilon^N overflows for epsilon={epsilon}, N={num_agents}")
        super().__init__(num_agents)
        self.epsilon = float(epsilon)
        self.frozen_order: list[int] = []

    def _script(self):
        n = self.num_agents
        active = np.arange(n)
        row = np.ones(n)
        for t in range(1, n + 1):
            alloc = yield row
            frozen = _smallest_index(alloc, active)
            self.frozen_order.append(frozen)
            self._event("freeze", frozen)
            active = active[active != frozen]
            if active.size == 0:
                return
            row = np.zeros(n)
            row[active] = self.epsilon ** (-(t + 1))


# ---------------------------------------------------------------------------
# banishment construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BanishmentConfig:
    """Era-of-banishment parameters: months last ``month_length`` rounds, the
    era spans ``num_years`` years, and round z of any month in year l carries
    weight beta^(-(L-l+1)(M-z+1))."""

    num_agents: int
    month_length: int
    num_years: int
    weight_base: float

    def __post_init__(self):
        n, m, l, beta = self.num_agents, self.month_length, self.num_years, self.weight_base
        if m < 1 or l < 1 or n < 1:
            raise ValidationError("banishment parameters must be positive")
        if beta <= 1:
            raise ValidationError(f"weight base must exceed 1, got {beta}")
        if n % (2 ** l * m) != 0:
            raise ValidationError(
                f"N must be divisible by 2^L * M = {2 ** l * m} "
                f"(years need whole months and an exact banished count), got N={n}")
        total = sum(m * self.weight(z, yr) for z in range(1, m + 1) for yr in range(1, l + 1))
        if not total < 1.0:
            raise ValidationError(
                f"sum of M*w over all months and years must stay below 1 "
                f"(got {total}); raise the weight base")

    def weight(self, month_round: int, year: int) -> float:
        l, m = self.num_years, self.month_length
        return float(self.weight_base) ** (-(l - year + 1) * (m - month_round + 1))

    @property
    def era_rounds(self) -> int:
        return self.num_agents - self.num_agents // 2 ** self.num_years

    @property
    def total_rounds(self) -> int:
        return self.num_agents + 1


def suggest_banishment_config(num_agents: int, month_length: int,
                              num_years: int) -> BanishmentConfig:
    """Pick the smallest integer weight base >= 2 satisfying the weight-sum
    invariant."""
    for beta in range(2, 1000):
        try:
            return BanishmentConfig(num_agents, month_length, num_years, float(beta))
        except ValidationError as err:
            if "weight base" in str(err) or "below 1" in str(err):
                continue
            raise
    raise ValidationError("no feasible weight base found below 1000")


class BanishmentAdversary(AdaptiveAdversary):
    """Three-era construction. Era of Banishment: each month walks a window of
    M active agents through rising weights, banishing the worst-served agent
    every round and clearing the survivors (plus one untouched agent) at month
    end; each year halves the surviving population. Era of Plenty: survivors
    cash out solo. Era of Collapse: all banished agents clash over one final
    item. Realizes V_i = 1 for every agent."""

    def __init__(self, config: BanishmentConfig):
        super().__init__(config.num_agents)
        self.config = config
        self.banished: list[int] = []

    def _script(self):
        cfg = self.config
        n, m, years = cfg.num_agents, cfg.month_length, cfg.num_years
        banished = np.zeros(n, dtype=bool)
        seen = np.zeros(n)
        for year in range(1, years + 1):
            cleared = np.zeros(n, dtype=bool)
            pool = [i for i in range(n) if not banished[i]]
            months = len(pool) // (2 * m)
            for _ in range(months):
                participants = [pool.pop(0) for _ in range(m)]
                for z in range(1, m + 1):
                    row = np.zeros(n)
                    w = cfg.weight(z, year)
                    row[participants] = w
                    seen[participants] += w
                    alloc = yield row
                    loser = _smallest_index(alloc, np.array(participants))
                    if alloc[loser] > 1.0 / m + 1e-12:
                        raise InvariantViolation("pigeonhole failed in banishment round")
                    self._event("banish", loser)
                    banished[loser] = True
                    self.banished.append(loser)
                    participants.remove(loser)
                    if z < m:
                        participants.append(pool.pop(0))
                for survivor in participants:
                    self._event("clear", survivor)
                    cleared[survivor] = True
                extra = pool.pop(0)
                self._event("clear", extra)
                cleared[extra] = True
            if pool:
                raise InvariantViolation("banishment accounting left agents unprocessed")
        # Era of Plenty: each survivor collects their remainder solo
        for agent in range(n):
            if not banished[agent]:
                row = np.zeros(n)
                row[agent] = 1.0 - seen[agent]
                seen[agent] = 1.0
                yield row
        # Era of Collapse: every banished agent has their remainder
        row = np.zeros(n)
        for agent in range(n):
            if banished[agent]:
                row[agent] = 1.0 - seen[agent]
        yield row


def adv_mw_adaptive(num_agents: int) -> MWAdaptiveAdversary:
    return MWAdaptiveAdversary(num_agents)


def adv_unscaled(num_agents: int, epsilon: float) -> UnscaledAdversary:
    return UnscaledAdversary(num_agents, epsilon)


def adv_banishment(config: BanishmentConfig) -> BanishmentAdversary:
    return BanishmentAdversary(config)
