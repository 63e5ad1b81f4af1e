"""Run loops, metrics, bound evaluation, lemma verification, and sweeps."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import adversary as adv
from .core import (ValidationError, ValueMatrix, competitive_ratio, error_factors,
                   make_predictions, maxmin, monopolist_values, nsw,
                   PredictionErrorSpec, utilities)
from .offline import dual_certificate, eg_solve, predicted_price_certificate
from .online import (ALLOCATOR_KINDS, PriceTrace, kkt_check, make_allocator,
                     round_lemma_bound)

LEMMA_SLACK = 1e-9


@dataclass
class RunResult:
    values: ValueMatrix
    allocation: np.ndarray
    utilities: np.ndarray
    price_trace: PriceTrace | None = None
    per_round_lemma_slack: np.ndarray | None = None
    event_log: list = field(default_factory=list)


@dataclass
class RunMetrics:
    nsw_alg: float
    mw_alg: float
    nsw_opt: float
    oracle_gap: float
    oracle_certified: bool
    ratio_nsw: float
    dual_bound: float | None
    predicted_bound: float | None
    theorem_bound: float
    mw_opt: float | None = None
    ratio_mw: float | None = None


def run_online(kind: str, source, predictions: np.ndarray | None = None,
               uniform_over: str = "all") -> RunResult:
    """Feed an instance round by round through an allocator.

    ``source`` is a ValueMatrix (static) or an AdaptiveAdversary, whose next
    values are revealed only after it sees the previous allocation row.
    """
    if isinstance(source, ValueMatrix):
        n = source.num_agents
    elif isinstance(source, adv.AdaptiveAdversary):
        n = source.num_agents
    else:
        raise ValidationError(f"unsupported source type {type(source).__name__}")
    allocator = make_allocator(kind, n, predictions, uniform_over=uniform_over)

    rows = []
    if isinstance(source, ValueMatrix):
        for t in range(source.num_rounds):
            rows.append(allocator.step(source.values[t]))
        realized = source
        events = []
    else:
        v = source.next_values(None)
        while v is not None:
            row = allocator.step(v)
            rows.append(row)
            v = source.next_values(row)
        realized = source.realized()
        events = list(source.events)

    allocation = np.array(rows)
    profile = utilities(realized, allocation)
    trace = allocator.trace() if hasattr(allocator, "trace") else None
    slack = None
    if trace is not None:
        bounds = 2.0 * (np.log(trace.predicted_after) - np.log(trace.predicted_before)).sum(axis=1)
        slack = bounds - trace.prices
    return RunResult(values=realized, allocation=allocation, utilities=profile,
                     price_trace=trace, per_round_lemma_slack=slack, event_log=events)


def theorem_bound(over_factors, under_factors, num_agents: int, num_rounds: int) -> float:
    """Competitive-ratio guarantee for set-aside greedy with prediction error
    factors c, d:

        (prod c)^(1/N) * min( ln(2N) + mean(ln d), ln(2T) + ln(max d) )
    """
    c = np.broadcast_to(np.asarray(over_factors, dtype=float), (num_agents,))
    d = np.broadcast_to(np.asarray(under_factors, dtype=float), (num_agents,))
    if (c < 1).any() or (d < 1).any():
        raise ValidationError("error factors must be >= 1")
    log_d = np.log(d)
    by_agents = math.log(2 * num_agents) + log_d.mean()
    by_rounds = math.log(2 * num_rounds) + log_d.max()
    return math.exp(np.log(c).mean()) * min(by_agents, by_rounds)


def evaluate(values: ValueMatrix, result: RunResult,
             over_factors=1.0, under_factors=1.0,
             mw_opt: float | None = None, oracle_tol: float = 1e-6) -> RunMetrics:
    """All run metrics: welfare, the measured ratio against the certified EG
    optimum, and the chain of certificates (dual, predicted, theorem)."""
    n, t = values.num_agents, values.num_rounds
    c = np.broadcast_to(np.asarray(over_factors, dtype=float), (n,)).copy()
    d = np.broadcast_to(np.asarray(under_factors, dtype=float), (n,)).copy()
    oracle = eg_solve(values, tol=oracle_tol)
    nsw_alg = nsw(result.utilities)
    metrics = RunMetrics(
        nsw_alg=nsw_alg,
        mw_alg=maxmin(result.utilities),
        nsw_opt=oracle.nsw_value,
        oracle_gap=oracle.duality_gap,
        oracle_certified=oracle.certified,
        ratio_nsw=competitive_ratio(oracle.nsw_value, nsw_alg),
        dual_bound=None,
        predicted_bound=None,
        theorem_bound=theorem_bound(c, d, n, t),
        mw_opt=mw_opt,
        ratio_mw=None if mw_opt is None else competitive_ratio(mw_opt, maxmin(result.utilities)),
    )
    if (result.utilities > 0).all():
        _, metrics.dual_bound = dual_certificate(values, result.allocation, c)
    if result.price_trace is not None:
        metrics.predicted_bound = predicted_price_certificate(result.price_trace, c, n)
    return metrics


@dataclass
class LemmaReport:
    ok: bool
    kkt_ok: bool
    price_lemma_ok: bool
    total_bound_ok: bool
    min_round_slack: float
    price_sum_bound: float
    theorem_bound: float
    violations: list = field(default_factory=list)


def verify_lemmas(result: RunResult, over_factors=1.0, under_factors=1.0) -> LemmaReport:
    """Check a set-aside greedy run against its supporting lemmas: per-round
    greedy KKT, the per-round price bound, and the total price-sum bound."""
    trace = result.price_trace
    if trace is None:
        raise ValidationError("lemma verification needs a set-aside greedy trace")
    values = result.values.values
    t_count, n = values.shape
    violations = []
    kkt_ok = True
    for t in range(t_count):
        report = kkt_check(trace.predicted_before[t], values[t], trace.greedy[t], tol=1e-9)
        if not report.ok:
            kkt_ok = False
            violations.append(f"round {t}: greedy KKT violated {report.violations}")
    slacks = np.empty(t_count)
    for t in range(t_count):
        bound = 2.0 * float(np.sum(np.log(trace.predicted_after[t])
                                   - np.log(trace.predicted_before[t])))
        slacks[t] = bound - trace.prices[t]
        if slacks[t] < -LEMMA_SLACK:
            violations.append(f"round {t}: price {trace.prices[t]} exceeds lemma bound {bound}")
    price_lemma_ok = bool((slacks >= -LEMMA_SLACK).all())
    bound_formula = theorem_bound(over_factors, under_factors, n, t_count)
    price_sum = float(trace.prices.sum()) / n
    total_ok = price_sum <= bound_formula + LEMMA_SLACK
    if not total_ok:
        violations.append(f"price sum {price_sum} exceeds theorem bound {bound_formula}")
    return LemmaReport(
        ok=kkt_ok and price_lemma_ok and total_ok,
        kkt_ok=kkt_ok,
        price_lemma_ok=price_lemma_ok,
        total_bound_ok=total_ok,
        min_round_slack=float(slacks.min()) if t_count else 0.0,
        price_sum_bound=price_sum,
        theorem_bound=bound_formula,
        violations=violations,
    )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = (
    "family", "N", "T", "algorithm", "error_mode", "seed",
    "nsw_alg", "nsw_opt", "ratio_nsw", "mw_alg", "mw_opt", "ratio_mw",
    "dual_bound", "predicted_bound", "theorem_bound", "oracle_gap", "error",
)

STATIC_FAMILIES = ("mw-hardness", "proportional-killer", "myopic-killer")
ADAPTIVE_FAMILIES = ("unscaled", "banishment", "mw-adaptive")


def parse_algorithm(spec: str) -> tuple[str, str]:
    """Algorithm spec strings: a kind, optionally 'uniform(nonzero)'."""
    name = spec.strip()
    if name == "uniform(nonzero)":
        return "uniform", "nonzero"
    if name == "uniform(all)":
        return "uniform", "all"
    if name not in ALLOCATOR_KINDS:
        raise ValidationError(f"unknown algorithm {spec!r}")
    return name, "all"


def parse_error_mode(mode: str, num_agents: int, seed: int) -> PredictionErrorSpec:
    """Error-mode strings: exact | over:F | under:F | random:C,D[,seed]."""
    text = mode.strip()
    if text == "exact":
        return PredictionErrorSpec.exact(num_agents)
    if ":" in text:
        name, _, arg = text.partition(":")
        try:
            if name == "over":
                return PredictionErrorSpec.over(float(arg), num_agents)
            if name == "under":
                return PredictionErrorSpec.under(float(arg), num_agents)
            if name == "random":
                parts = [p for p in arg.split(",") if p]
                if len(parts) == 2:
                    c, d = (float(parts[0]), float(parts[1]))
                    return PredictionErrorSpec.random(c, d, num_agents, seed)
                if len(parts) == 3:
                    return PredictionErrorSpec.random(
                        float(parts[0]), float(parts[1]), num_agents, int(parts[2]))
        except ValueError as err:
            raise ValidationError(f"bad error mode {mode!r}: {err}") from None
    raise ValidationError(f"unknown error mode {mode!r}")


@dataclass(frozen=True)
class SweepCell:
    family: str
    num_agents: int
    algorithm: str
    error_mode: str
    seed: int
    params: tuple = ()  # sorted (key, value) pairs of family parameters


def expand_sweep_config(config: dict) -> list[SweepCell]:
    """Cartesian product of family instances, algorithms, error modes, seeds,
    in configuration order."""
    families = config.get("families", [])
    algorithms = config.get("algorithms", [])
    error_modes = config.get("error_modes", ["exact"])
    seeds = config.get("seeds", [0])
    cells = []
    for fam in families:
        name = fam.get("family")
        if name not in STATIC_FAMILIES + ADAPTIVE_FAMILIES:
            raise ValidationError(f"unknown family {name!r}")
        ns = fam.get("n")
        ns = [ns] if isinstance(ns, int) else list(ns)
        params = tuple(sorted((k, v) for k, v in fam.items() if k not in ("family", "n")))
        for n in ns:
            for algorithm in algorithms:
                parse_algorithm(algorithm)
                for mode in error_modes:
                    for seed in seeds:
                        cells.append(SweepCell(name, int(n), algorithm, mode, int(seed), params))
    return cells


def _build_source(cell: SweepCell):
    """Instantiate the cell's instance or adversary plus its analytic maxmin
    optimum where one exists."""
    params = dict(cell.params)
    if cell.family == "mw-hardness":
        vm, mw_opt, _ = gen = adv.gen_mw_hardness(cell.num_agents, seed=cell.seed)
        return vm, mw_opt
    if cell.family == "proportional-killer":
        return adv.gen_proportional_killer(cell.num_agents), None
    if cell.family == "myopic-killer":
        return adv.gen_myopic_killer(cell.num_agents), None
    if cell.family == "unscaled":
        return adv.adv_unscaled(cell.num_agents, float(params.get("eps", 1e-3))), None
    if cell.family == "mw-adaptive":
        source = adv.adv_mw_adaptive(cell.num_agents)
        return source, source.analytic_mw_opt
    config = BanishmentConfig = adv.BanishmentConfig(
        cell.num_agents, int(params.get("m", 2)), int(params.get("l", 1)),
        float(params.get("beta", 4.0)))
    return adv.adv_banishment(config), None


def run_cell(cell: SweepCell, oracle_tol: float = 1e-6) -> dict:
    """Execute one sweep cell and flatten the metrics into a row dict."""
    row = {col: "" for col in SWEEP_COLUMNS}
    row.update(family=cell.family, N=cell.num_agents, algorithm=cell.algorithm,
               error_mode=cell.error_mode, seed=cell.seed)
    try:
        kind, uniform_over = parse_algorithm(cell.algorithm)
        source, mw_opt = _build_source(cell)
        # nominal monopolist values: the realized column sums for static
        # families, all-ones for the adaptive ones (exact for the normalized
        # families, the uninformed default for the unscaled one)
        if isinstance(source, ValueMatrix):
            nominal = monopolist_values(source)
        else:
            nominal = np.ones(cell.num_agents)
        spec = parse_error_mode(cell.error_mode, cell.num_agents, cell.seed)
        predictions = make_predictions(nominal, spec)
        result = run_online(kind, source, predictions, uniform_over=uniform_over)
        realized_v = monopolist_values(result.values)
        c, d = error_factors(realized_v, predictions)
        metrics = evaluate(result.values, result, c, d, mw_opt=mw_opt, oracle_tol=oracle_tol)
        row.update(
            T=result.values.num_rounds,
            nsw_alg=metrics.nsw_alg,
            nsw_opt=metrics.nsw_opt,
            ratio_nsw=metrics.ratio_nsw,
            mw_alg=metrics.mw_alg,
            mw_opt="" if metrics.mw_opt is None else metrics.mw_opt,
            ratio_mw="" if metrics.ratio_mw is None else metrics.ratio_mw,
            dual_bound="" if metrics.dual_bound is None else metrics.dual_bound,
            predicted_bound="" if metrics.predicted_bound is None else metrics.predicted_bound,
            theorem_bound=metrics.theorem_bound,
            oracle_gap=metrics.oracle_gap,
        )
    except Exception as err:  # per-cell failures land in the row, not the sweep
        row["error"] = f"{type(err).__name__}: {err}"
    return row


def sweep_threads() -> int:
    env = os.environ.get("NSWSIM_THREADS", "")
    if env.strip():
        try:
            workers = int(env)
        except ValueError:
            raise ValidationError(f"NSWSIM_THREADS must be an integer, got {env!r}") from None
        if workers < 1:
            raise ValidationError("NSWSIM_THREADS must be >= 1")
        return workers
    return os.cpu_count() or 1


def sweep(config: dict, oracle_tol: float = 1e-6, max_workers: int | None = None) -> list[dict]:
    """Run every cell of a sweep configuration; rows come back in
    configuration order regardless of completion order."""
    cells = expand_sweep_config(config)
    tol = float(config.get("oracle_tol", oracle_tol))
    workers = max_workers if max_workers is not None else sweep_threads()
    if workers <= 1 or len(cells) <= 1:
        return [run_cell(cell, tol) for cell in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda cell: run_cell(cell, tol), cells))
