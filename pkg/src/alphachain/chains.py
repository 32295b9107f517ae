"""The two mining chains: seed generation and feedback-driven optimization.

Generation proposes fresh factors against the current pools, sequentially,
so each proposal sees everything admitted before it. Optimization takes one
seed and refines it step by step, steering each re-ask with a feedback
summary of whichever score dimensions look weakest. Both chains draw from a
shared completion budget where the unit is one backend attempt, parse
failures included; that makes cost accounting honest against a metered API.

With the mock backend and serial optimization, a whole mining run is a pure
function of its config: ids, timestamps and the event log come from
deterministic counters, and every completion seed derives from the run seed
and the attempt index.
"""

from __future__ import annotations

import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from hashlib import blake2b

from .dsl import Expr, ExprLimits, OPERATORS, canonical_hash, format_expr, parse, validate
from .engine import evaluate
from .llm import (
    BASE_MARKER,
    GENERATE_SENTINEL,
    OPTIMIZE_SENTINEL,
    BackendConfig,
    BackendError,
    CompletionRequest,
    FactorProposal,
    complete,
    parse_proposal,
)
from .metrics import (
    InsufficientDays,
    MetricConfig,
    SeriesTooShort,
    ZeroDispersion,
)
from .panel import ForwardReturns, Panel
from .pool import (
    DEPRECATED,
    EFFECTIVE,
    EvaluationDegenerate,
    FactorRecord,
    Lineage,
    PoolState,
    Score,
    Thresholds,
    admit,
    check,
    evaluate_factor,
)

_EPOCH = datetime(2000, 1, 1)

FIELD_DESCRIPTIONS = {
    "open": "daily opening price",
    "high": "daily highest price",
    "low": "daily lowest price",
    "close": "daily closing price",
    "volume": "shares traded during the day",
    "amount": "currency value traded during the day",
    "change": "daily close-over-close return",
    "vwap": "volume-weighted average price (amount / volume)",
}

_DIRECTIVES = {
    "strength": "enhance the predictive signal so the factor orders future returns more sharply",
    "consistency": "improve temporal stability so the daily rank correlation holds from day to day",
    "efficiency": "smooth the signal to cut portfolio turnover",
    "diversity": "differentiate the factor from the correlated references already in the pool",
}


class BudgetExhausted(RuntimeError):
    pass


class BackendFailure(RuntimeError):
    pass


class GenerationStalled(RuntimeError):
    def __init__(self, attempts: int):
        super().__init__(f"{attempts} consecutive unusable responses")
        self.attempts = attempts


@dataclass(frozen=True)
class ChainConfig:
    total_budget: int = 1000
    m_max: int = 5
    stop_on_first_effective: bool = True
    parse_retries: int = 3
    prompt_pool_sample: int = 10
    min_seeds_before_opt: int = 5
    max_parallel_opt_chains: int = 1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.total_budget < 0:
            raise ValueError("total_budget must be >= 0")
        if self.m_max < 1:
            raise ValueError("m_max must be >= 1")
        if self.parse_retries < 1:
            raise ValueError("parse_retries must be >= 1")
        if self.max_parallel_opt_chains < 1:
            raise ValueError("max_parallel_opt_chains must be >= 1")


@dataclass(frozen=True)
class FeedbackSummary:
    """Which score dimensions fail (worst first), and what to do about it.

    weakest_dimensions holds the failing dimensions ordered by how badly
    they miss; when everything passes it names the one closest to its
    threshold so the next step still has a direction."""

    score: Score
    weakest_dimensions: tuple[str, ...]
    directive_text: str

    def __post_init__(self) -> None:
        if self.weakest_dimensions and not self.directive_text:
            raise ValueError("directive_text must be nonempty when dimensions fail")


@dataclass(frozen=True)
class ChainStep:
    record: FactorRecord
    feedback: FeedbackSummary


@dataclass(frozen=True)
class OptimizationHistory:
    seed: FactorRecord
    steps: tuple[ChainStep, ...]
    discarded: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        for i, step in enumerate(self.steps):
            lineage = step.record.lineage
            if lineage.seed_id != self.seed.id or lineage.step != i + 1:
                raise ValueError(
                    f"step {i} lineage {lineage} does not chain from seed {self.seed.id}"
                )


@dataclass(frozen=True)
class MiningResult:
    pool: PoolState
    candidates_spent: int
    seeds_generated: int
    seeds_discarded: int
    events: tuple[dict, ...] = field(default_factory=tuple)


class BudgetMeter:
    """Thread-safe completion counter; spending is atomic and never exceeds
    the total. try_spend returns the 1-based attempt index, or None when the
    budget is gone."""

    def __init__(self, total: int):
        self.total = total
        self._spent = 0
        self._lock = threading.Lock()

    def try_spend(self) -> int | None:
        with self._lock:
            if self._spent >= self.total:
                return None
            self._spent += 1
            return self._spent

    @property
    def spent(self) -> int:
        with self._lock:
            return self._spent

    @property
    def remaining(self) -> int:
        with self._lock:
            return self.total - self._spent


class _Allocator:
    """Sequential record ids and a logical admission clock (one second per
    record from a fixed epoch) so serial runs are byte-reproducible."""

    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def next(self) -> tuple[str, str]:
        with self._lock:
            self._n += 1
            n = self._n
        stamp = (_EPOCH + timedelta(seconds=n)).strftime("%Y-%m-%dT%H:%M:%SZ")
        return f"f{n:04d}", stamp


def _margins(score: Score, thresholds: Thresholds) -> dict[str, float]:
    """Signed distance to each gate; negative means the dimension fails."""
    return {
        "strength": score.strength - thresholds.min_strength,
        "consistency": score.consistency - thresholds.min_consistency,
        "efficiency": thresholds.max_efficiency - score.efficiency,
        "diversity": score.diversity - thresholds.min_diversity,
    }


def synthesize_feedback(score: Score, thresholds: Thresholds) -> FeedbackSummary:
    margins = _margins(score, thresholds)
    ordered = sorted(margins, key=lambda d: margins[d])
    failing = tuple(d for d in ordered if margins[d] < 0)
    if failing:
        lines = [f"- {d}: {_DIRECTIVES[d]}." for d in failing]
        directive = "\n".join(lines)
        return FeedbackSummary(score, failing, directive)
    nearest = ordered[0]
    directive = (
        f"All four criteria pass; {nearest} has the least headroom, so "
        f"{_DIRECTIVES[nearest]} without losing the rest."
    )
    return FeedbackSummary(score, (nearest,), directive)


def _operator_signature(op) -> str:
    args = ["x", "y", "z"][: op.arity]
    args += ["N", "M"][: op.window_params]
    if op.extra_params:
        args.append("q" if op.name == "Quantile" else "n")
    return f"{op.name}({', '.join(args)})"


def _catalog_text(limits: ExprLimits) -> str:
    lines = ["Fields:"]
    for name, desc in FIELD_DESCRIPTIONS.items():
        lines.append(f"  ${name}: {desc}")
    lines.append("Operators (windows N, M are positive integer day counts):")
    for op in OPERATORS.values():
        if limits.operator_whitelist is not None and op.name not in limits.operator_whitelist:
            continue
        lines.append(f"  {_operator_signature(op)} [{op.category}]")
    lines.append(
        f"Limits: expression depth <= {limits.max_depth}, "
        f"nodes <= {limits.max_nodes}, windows <= {limits.max_window}."
    )
    return "\n".join(lines)


_PROTOCOL_TEXT = (
    "Respond with exactly one fenced block containing three lines:\n"
    "NAME: <short identifier>\n"
    "EXPR: <formula using only the fields and operators above>\n"
    "DESC: <one sentence on the idea>"
)


def _score_line(record: FactorRecord) -> str:
    s = record.score
    return (
        f"{record.expr_text} | strength={s.strength!r} consistency={s.consistency!r} "
        f"efficiency={s.efficiency!r} diversity={s.diversity!r}"
    )


def build_generation_prompt(
    pool: PoolState, limits: ExprLimits, cfg: ChainConfig
) -> tuple[str, str]:
    """System text carries the task, the data dictionary, the operator
    catalog and the response protocol; user text embeds the strongest
    effective factors as positive references and the most recent deprecated
    ones as negative references."""
    system = (
        "You design formulaic alpha factors over daily market data. Each factor\n"
        "is one expression that maps the recent history of every instrument to a\n"
        "cross-sectional score; higher scores should precede higher returns.\n"
        "Diversity is the highest priority: propose structure unlike any\n"
        "reference expression shown.\n"
        + _catalog_text(limits)
        + "\n"
        + _PROTOCOL_TEXT
    )
    effective, deprecated = pool.snapshot()
    strongest = sorted(effective, key=lambda r: -r.score.strength)
    positives = strongest[: cfg.prompt_pool_sample]
    negatives = list(deprecated[-cfg.prompt_pool_sample:])
    lines = [GENERATE_SENTINEL]
    lines.append("Effective factors already found (do not duplicate; cover their gaps):")
    if positives:
        lines.extend(f"  {_score_line(r)}" for r in positives)
    else:
        lines.append("  (none yet)")
    lines.append("Deprecated factors that failed the gate (avoid these patterns):")
    if negatives:
        lines.extend(f"  {r.expr_text}" for r in negatives)
    else:
        lines.append("  (none yet)")
    lines.append("Propose one new factor.")
    return system, "\n".join(lines)


def build_optimization_prompt(
    history: OptimizationHistory,
    feedback: FeedbackSummary,
    limits: ExprLimits,
    cfg: ChainConfig,
) -> tuple[str, str]:
    """The refinement prompt: the seed, every prior variant with its score,
    the current base expression, and directives keyed to the weakest score
    dimensions."""
    system = (
        "You refine one formulaic alpha factor. Keep what works, change what\n"
        "the feedback criticizes, and stay within the grammar below.\n"
        + _catalog_text(limits)
        + "\n"
        + _PROTOCOL_TEXT
    )
    base = history.steps[-1].record if history.steps else history.seed
    lines = [OPTIMIZE_SENTINEL]
    lines.append(f"Seed factor: {_score_line(history.seed)}")
    if history.steps:
        lines.append("Prior variants, oldest first:")
        lines.extend(f"  {_score_line(s.record)}" for s in history.steps)
    lines.append(f"{BASE_MARKER} {base.expr_text}")
    lines.append("Feedback on the current base:")
    lines.append(feedback.directive_text)
    lines.append("Propose one refined variant of the base expression.")
    return system, "\n".join(lines)


def _seed_hint(rng_seed: int, attempt_index: int) -> int:
    blob = f"{rng_seed}:{attempt_index}".encode("utf-8")
    return int.from_bytes(blake2b(blob, digest_size=8).digest(), "big")


def _text_hash(text: str) -> str:
    return blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


class _Run:
    """Shared run context: budget, id allocation, event log, knobs."""

    def __init__(self, cfg, meter, thresholds, limits, metric_cfg, events, allocator, transport):
        self.cfg = cfg
        self.meter = meter or BudgetMeter(cfg.total_budget)
        self.thresholds = thresholds or Thresholds()
        self.limits = limits or ExprLimits()
        self.metric_cfg = metric_cfg or MetricConfig()
        self.events = events if events is not None else []
        self.allocator = allocator or _Allocator()
        self.transport = transport
        self._events_lock = threading.Lock()

    def log(self, **entry) -> None:
        with self._events_lock:
            self.events.append(entry)


def _attempt_completion(run: _Run, backend: BackendConfig, system: str, user: str):
    """Spend one budget unit and ask the backend once. Returns (index, text);
    raises BudgetExhausted or BackendFailure."""
    index = run.meter.try_spend()
    if index is None:
        raise BudgetExhausted(f"all {run.meter.total} completions spent")
    request = CompletionRequest(
        system_text=system,
        user_text=user,
        seed_hint=_seed_hint(run.cfg.rng_seed, index),
    )
    try:
        text = complete(request, backend, transport=run.transport)
    except BackendError as exc:
        run.log(event="backend_failure", spent=index, error=str(exc))
        raise BackendFailure(str(exc)) from exc
    run.log(
        event="completion",
        spent=index,
        prompt_hash=_text_hash(system + "\x1f" + user),
        response_hash=_text_hash(text),
    )
    return index, text


def _usable_proposal(run: _Run, pool: PoolState, text: str) -> tuple[FactorProposal, Expr] | None:
    """Parse and screen one response; None when it cannot become a record."""
    try:
        proposal = parse_proposal(text)
    except ValueError as exc:
        run.log(event="unusable", reason=f"parse: {exc}")
        return None
    expr = parse(proposal.expr_text)
    violations = validate(expr, run.limits)
    if violations:
        run.log(event="unusable", reason=f"limits: {violations[0].code}")
        return None
    if canonical_hash(expr) in pool:
        run.log(event="unusable", reason="duplicate")
        return None
    return proposal, expr


def _score_candidate(run, pool, expr, panel, returns):
    """Evaluate and score; None when the candidate is degenerate."""
    try:
        signal = evaluate(expr, panel)
        score = evaluate_factor(
            expr, panel, returns, pool, run.metric_cfg, signal=signal
        )
    except (EvaluationDegenerate, SeriesTooShort, ZeroDispersion, InsufficientDays) as exc:
        run.log(event="unusable", reason=f"degenerate: {type(exc).__name__}")
        return None
    return signal, score


def _admit_record(run, pool, proposal, expr, score, lineage, signal) -> FactorRecord | None:
    status = EFFECTIVE if check(score, run.thresholds) else DEPRECATED
    record_id, created_at = run.allocator.next()
    record = FactorRecord(
        id=record_id,
        expr_text=format_expr(expr),
        hash=canonical_hash(expr),
        name=proposal.name,
        description=proposal.description,
        score=score,
        status=status,
        lineage=lineage,
        created_at=created_at,
    )
    result = admit(record, pool, signal=signal if status == EFFECTIVE else None)
    run.log(
        event="admission",
        id=record.id,
        hash=record.hash,
        status=status,
        admitted=result.admitted,
    )
    return record if result.admitted else None


@dataclass(frozen=True)
class GenerationOutcome:
    record: FactorRecord
    spent: int


def run_generation_step(
    pool: PoolState,
    backend: BackendConfig,
    panel: Panel,
    returns: ForwardReturns,
    cfg: ChainConfig,
    *,
    meter: BudgetMeter | None = None,
    thresholds: Thresholds | None = None,
    limits: ExprLimits | None = None,
    metric_cfg: MetricConfig | None = None,
    events: list | None = None,
    allocator: _Allocator | None = None,
    transport=None,
) -> GenerationOutcome:
    """One seed factor: up to parse_retries completions until a response
    yields a fresh, valid, scoreable expression. Each attempt costs one
    budget unit. The record is admitted under whichever status the gate
    decides and returned either way: every seed feeds an optimization chain."""
    run = _Run(cfg, meter, thresholds, limits, metric_cfg, events, allocator, transport)
    return _generation_step(run, pool, backend, panel, returns)


def _generation_step(run, pool, backend, panel, returns) -> GenerationOutcome:
    spent_here = 0
    for _ in range(run.cfg.parse_retries):
        system, user = build_generation_prompt(pool, run.limits, run.cfg)
        _, text = _attempt_completion(run, backend, system, user)
        spent_here += 1
        usable = _usable_proposal(run, pool, text)
        if usable is None:
            continue
        proposal, expr = usable
        scored = _score_candidate(run, pool, expr, panel, returns)
        if scored is None:
            continue
        signal, score = scored
        record = _admit_record(run, pool, proposal, expr, score, Lineage(), signal)
        if record is None:
            continue  # lost a race to an identical hash
        return GenerationOutcome(record, spent_here)
    raise GenerationStalled(spent_here)


def run_optimization_chain(
    seed: FactorRecord,
    pool: PoolState,
    backend: BackendConfig,
    panel: Panel,
    returns: ForwardReturns,
    cfg: ChainConfig,
    *,
    meter: BudgetMeter | None = None,
    thresholds: Thresholds | None = None,
    limits: ExprLimits | None = None,
    metric_cfg: MetricConfig | None = None,
    events: list | None = None,
    allocator: _Allocator | None = None,
    transport=None,
) -> OptimizationHistory:
    """Refine one seed for up to m_max variants, feeding each step the
    feedback from the last. Stops early on the first effective variant (when
    configured), on budget exhaustion mid-chain (partial history, exact
    accounting), or when retries stall. A seed that never produced an
    effective record, itself included, is marked discarded."""
    run = _Run(cfg, meter, thresholds, limits, metric_cfg, events, allocator, transport)
    if run.meter.remaining <= 0:
        raise BudgetExhausted("optimization chain needs budget on entry")
    return _optimization_chain(run, seed, pool, backend, panel, returns)


def _optimization_chain(run, seed, pool, backend, panel, returns) -> OptimizationHistory:
    steps: list[ChainStep] = []
    feedback = synthesize_feedback(seed.score, run.thresholds)
    any_effective = seed.status == EFFECTIVE

    def finish() -> OptimizationHistory:
        effective_somewhere = any_effective or any(
            s.record.status == EFFECTIVE for s in steps
        )
        history = OptimizationHistory(seed, tuple(steps), not effective_somewhere)
        run.log(
            event="chain_end",
            seed=seed.id,
            steps=len(steps),
            discarded=history.discarded,
        )
        return history

    while len(steps) < run.cfg.m_max:
        history_so_far = OptimizationHistory(seed, tuple(steps), False)
        variant = None
        for _ in range(run.cfg.parse_retries):
            system, user = build_optimization_prompt(
                history_so_far, feedback, run.limits, run.cfg
            )
            try:
                _, text = _attempt_completion(run, backend, system, user)
            except BudgetExhausted:
                return finish()
            usable = _usable_proposal(run, pool, text)
            if usable is None:
                continue
            proposal, expr = usable
            scored = _score_candidate(run, pool, expr, panel, returns)
            if scored is None:
                continue
            signal, score = scored
            lineage = Lineage(seed_id=seed.id, step=len(steps) + 1)
            record = _admit_record(run, pool, proposal, expr, score, lineage, signal)
            if record is not None:
                variant = record, score
                break
        if variant is None:
            break  # stalled: terminate the chain early
        record, score = variant
        feedback = synthesize_feedback(score, run.thresholds)
        steps.append(ChainStep(record, feedback))
        if record.status == EFFECTIVE and run.cfg.stop_on_first_effective:
            break
    return finish()


def run_mining(
    panel: Panel,
    returns: ForwardReturns,
    backend: BackendConfig,
    cfg: ChainConfig,
    *,
    thresholds: Thresholds | None = None,
    limits: ExprLimits | None = None,
    metric_cfg: MetricConfig | None = None,
    transport=None,
) -> MiningResult:
    """The full loop: keep a small queue of seeds ahead of the optimizers,
    alternate generation and optimization until the budget is gone. The
    generation chain is strictly sequential; optimization chains run
    concurrently up to max_parallel_opt_chains with all pool writes
    serialized. Partial progress survives backend failures."""
    run = _Run(cfg, BudgetMeter(cfg.total_budget), thresholds, limits, metric_cfg, [], _Allocator(), transport)
    pool = PoolState()
    seeds_generated = 0
    seeds_discarded = 0
    queue: deque[FactorRecord] = deque()
    parallel = cfg.max_parallel_opt_chains > 1
    executor = ThreadPoolExecutor(cfg.max_parallel_opt_chains) if parallel else None
    pending = []

    def drain_one_chain(seed_record) -> OptimizationHistory:
        return _optimization_chain(run, seed_record, pool, backend, panel, returns)

    try:
        while run.meter.remaining > 0:
            if len(queue) < cfg.min_seeds_before_opt:
                try:
                    outcome = _generation_step(run, pool, backend, panel, returns)
                except GenerationStalled:
                    continue
                except (BudgetExhausted, BackendFailure):
                    break
                seeds_generated += 1
                queue.append(outcome.record)
                continue
            seed_record = queue.popleft()
            if parallel:
                pending.append(executor.submit(drain_one_chain, seed_record))
            else:
                try:
                    history = drain_one_chain(seed_record)
                except BackendFailure:
                    break
                seeds_discarded += int(history.discarded)
        for future in pending:
            try:
                seeds_discarded += int(future.result().discarded)
            except BackendFailure:
                pass
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    return MiningResult(
        pool=pool,
        candidates_spent=run.meter.spent,
        seeds_generated=seeds_generated,
        seeds_discarded=seeds_discarded,
        events=tuple(run.events),
    )
