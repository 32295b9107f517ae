"""Factor scoring, the admission gate, and the two factor pools.

A candidate factor earns a four-dimensional score: strength (mean daily rank
IC), consistency (the rank-IC series' mean over its dispersion), efficiency
(top-decile turnover) and diversity (distance from the nearest effective
factor). The gate admits it into the effective pool when all four clear their
thresholds; everything else lands in the deprecated pool, kept as a negative
reference. Both pools persist as JSON lines.

Scores are frozen at admission. A factor's diversity is measured against the
effective pool as it stood at its own evaluation time and is never revisited,
so pool contents depend on admission order; that order is part of a run's
identity.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

import numpy as np

from .dsl import Expr, canonical_hash, format_expr, parse
from .engine import SignalMatrix, evaluate
from .metrics import (
    MetricConfig,
    daily_rank_ic,
    diversity,
    factor_turnover,
    ir_of_series,
)
from .panel import ForwardReturns, Panel

EFFECTIVE = "effective"
DEPRECATED = "deprecated"

DUPLICATE_HASH = "duplicate-hash"

DEFAULT_TOP_K = 100


class EvaluationDegenerate(ValueError):
    """The candidate's signal is NaN everywhere, so no score exists."""


class IoFailure(OSError):
    pass


class SchemaViolation(ValueError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line
        self.detail = detail


@dataclass(frozen=True)
class Score:
    strength: float
    consistency: float
    efficiency: float
    diversity: float

    def __post_init__(self) -> None:
        for name in ("strength", "consistency", "efficiency", "diversity"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if not 0.0 <= self.efficiency <= 2.0:
            raise ValueError(f"efficiency must lie in [0, 2], got {self.efficiency}")
        if not 0.0 <= self.diversity <= 1.0:
            raise ValueError(f"diversity must lie in [0, 1], got {self.diversity}")


@dataclass(frozen=True)
class Thresholds:
    min_strength: float = 0.015
    min_consistency: float = 0.2
    max_efficiency: float = 1.5
    min_diversity: float = 0.2

    def __post_init__(self) -> None:
        for name in ("min_strength", "min_consistency", "max_efficiency", "min_diversity"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass(frozen=True)
class Lineage:
    """seed_id is None for seed factors themselves; step counts refinement
    rounds applied since the seed (0 = the seed)."""

    seed_id: str | None = None
    step: int = 0

    def __post_init__(self) -> None:
        if self.step < 0:
            raise ValueError("step must be >= 0")


@dataclass(frozen=True)
class FactorRecord:
    id: str
    expr_text: str
    hash: int
    name: str
    description: str
    score: Score
    status: str
    lineage: Lineage
    created_at: str

    def __post_init__(self) -> None:
        if self.status not in (EFFECTIVE, DEPRECATED):
            raise ValueError(f"status must be effective or deprecated, got {self.status!r}")
        expr = parse(self.expr_text)
        canonical = format_expr(expr)
        object.__setattr__(self, "expr_text", canonical)
        if self.hash != canonical_hash(expr):
            raise ValueError(
                f"hash {self.hash} does not match expression {canonical!r}"
            )

    @property
    def expr(self) -> Expr:
        return parse(self.expr_text)


@dataclass(frozen=True)
class Admission:
    admitted: bool
    reason: str | None = None


class PoolState:
    """Both pools plus a hash index; admissions are serialized on a lock.

    Signals of effective factors are cached by hash so scoring a candidate's
    diversity costs one pass over the effective pool, not a re-evaluation.
    """

    def __init__(self) -> None:
        self.effective: list[FactorRecord] = []
        self.deprecated: list[FactorRecord] = []
        self._hashes: set[int] = set()
        self._signals: dict[int, SignalMatrix] = {}
        self._lock = threading.Lock()

    def __contains__(self, hash_: int) -> bool:
        return hash_ in self._hashes

    def snapshot(self) -> tuple[tuple[FactorRecord, ...], tuple[FactorRecord, ...]]:
        with self._lock:
            return tuple(self.effective), tuple(self.deprecated)

    def signal_for(self, record: FactorRecord, panel: Panel) -> SignalMatrix:
        """Cached signal of an effective factor, evaluated on demand after a
        pool was loaded from disk without its signals."""
        cached = self._signals.get(record.hash)
        if cached is not None and cached.values.shape == (
            len(panel.calendar),
            len(panel.universe),
        ):
            return cached
        signal = evaluate(record.expr, panel)
        self._signals[record.hash] = signal
        return signal


def evaluate_factor(
    expr: Expr,
    panel: Panel,
    returns: ForwardReturns,
    pool: PoolState,
    cfg: MetricConfig,
    signal: SignalMatrix | None = None,
) -> Score:
    """Score a candidate against forward returns and the effective pool.

    Pass the signal when it is already evaluated; otherwise it is computed
    here. Degenerate candidates (all-NaN after warmup) raise rather than
    score.
    """
    if signal is None:
        signal = evaluate(expr, panel)
    if np.isnan(signal.values).all():
        raise EvaluationDegenerate(f"{format_expr(expr)} is NaN on every cell")
    series = daily_rank_ic(signal, returns, cfg)
    consistency = ir_of_series(series)
    strength = float(series.values.mean())
    efficiency = factor_turnover(signal, cfg)
    members = [pool.signal_for(r, panel) for r in pool.effective]
    div = diversity(signal, members, cfg)
    return Score(strength, consistency, efficiency, div)


def check(score: Score, thresholds: Thresholds) -> bool:
    """The admission gate: all four dimensions must clear their thresholds."""
    return (
        score.strength >= thresholds.min_strength
        and score.consistency >= thresholds.min_consistency
        and score.efficiency <= thresholds.max_efficiency
        and score.diversity >= thresholds.min_diversity
    )


def admit(
    record: FactorRecord, pool: PoolState, signal: SignalMatrix | None = None
) -> Admission:
    """Append the record to the pool named by its status, unless its hash is
    already present in either pool. Rejection is a value, not an error."""
    with pool._lock:
        if record.hash in pool._hashes:
            return Admission(False, DUPLICATE_HASH)
        pool._hashes.add(record.hash)
        if record.status == EFFECTIVE:
            pool.effective.append(record)
            if signal is not None:
                pool._signals[record.hash] = signal
        else:
            pool.deprecated.append(record)
    return Admission(True)


def select_top(pool: PoolState, K: int = DEFAULT_TOP_K) -> list[FactorRecord]:
    """The K effective records with highest strength; ties keep admission
    order (stable sort on a single descending key)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    ranked = sorted(pool.effective, key=lambda r: -r.score.strength)
    return ranked[:K]


def _record_to_json(record: FactorRecord) -> str:
    payload = {
        "id": record.id,
        "expr_text": record.expr_text,
        "hash": record.hash,
        "name": record.name,
        "description": record.description,
        "score": {
            "strength": record.score.strength,
            "consistency": record.score.consistency,
            "efficiency": record.score.efficiency,
            "diversity": record.score.diversity,
        },
        "status": record.status,
        "lineage": {"seed_id": record.lineage.seed_id, "step": record.lineage.step},
        "created_at": record.created_at,
    }
    return json.dumps(payload, separators=(",", ":"))


def _record_from_json(line: str, lineno: int) -> FactorRecord:
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(lineno, f"invalid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise SchemaViolation(lineno, "record must be a JSON object")
    try:
        score = Score(
            strength=float(payload["score"]["strength"]),
            consistency=float(payload["score"]["consistency"]),
            efficiency=float(payload["score"]["efficiency"]),
            diversity=float(payload["score"]["diversity"]),
        )
        lineage = Lineage(
            seed_id=payload["lineage"]["seed_id"],
            step=int(payload["lineage"]["step"]),
        )
        return FactorRecord(
            id=str(payload["id"]),
            expr_text=str(payload["expr_text"]),
            hash=int(payload["hash"]),
            name=str(payload["name"]),
            description=str(payload["description"]),
            score=score,
            status=str(payload["status"]),
            lineage=lineage,
            created_at=str(payload["created_at"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(lineno, str(exc)) from exc


def persist(pool: PoolState, path) -> None:
    """One JSON object per line, effective records first, admission order
    preserved within each pool. Floats serialize as shortest round-trip
    reprs, so load(persist(p)) reproduces scores bit for bit."""
    effective, deprecated = pool.snapshot()
    lines = [_record_to_json(r) for r in (*effective, *deprecated)]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise IoFailure(f"cannot write pool file {path}: {exc}") from exc


def load(path) -> PoolState:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read pool file {path}: {exc}") from exc
    pool = PoolState()
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        record = _record_from_json(line, lineno)
        if not admit(record, pool).admitted:
            raise SchemaViolation(lineno, f"duplicate hash {record.hash}")
    return pool


def export_csv(pool: PoolState, path) -> None:
    """Flat per-factor summary: one row per record, effective first."""
    effective, deprecated = pool.snapshot()
    lines = ["id,expr,strength,consistency,efficiency,diversity,status"]
    for r in (*effective, *deprecated):
        s = r.score
        lines.append(
            f'{r.id},"{r.expr_text}",{s.strength!r},{s.consistency!r},'
            f"{s.efficiency!r},{s.diversity!r},{r.status}"
        )
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write csv {path}: {exc}") from exc
