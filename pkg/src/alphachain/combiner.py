"""Composite signal construction: z-score factor signals per day, fit a
combination model on a train split, and emit the combined score matrix.

Two model kinds are supported. ``equal_weight`` averages the z-scored
signals with no fitting; ``ridge`` solves the closed-form penalized least
squares problem with an unpenalized intercept. Gradient-boosted or neural
combiners are out of scope; externally produced score matrices can be
imported through the long-format CSV interface below instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsl import parse
from .engine import SignalMatrix, evaluate
from .panel import DateSplit, ForwardReturns, Panel
from .pool import FactorRecord

EQUAL_WEIGHT = "equal_weight"
RIDGE = "ridge"

_MIN_IC_ROWS = 3


class NoUsableRows(ValueError):
    """Every (date, instrument) cell lost to NaN features or targets."""


class InsufficientRows(ValueError):
    """Fewer training rows than parameters to fit."""


class SingularSystem(ValueError):
    """Unpenalized normal equations are rank-deficient."""


class FactorMismatch(ValueError):
    """Factors passed to predict differ from the ones the model was fit on."""


class MalformedPredictions(ValueError):
    """External score CSV violates the (date, symbol, score) contract."""

    def __init__(self, line: int, detail: str) -> None:
        super().__init__(f"line {line}: {detail}")
        self.line = line


@dataclass(frozen=True)
class FeatureAssembly:
    """Flat samples for one split part: row r is (dates[r], instruments[r],
    features[r, :], targets[r]); every value finite by construction."""

    factor_ids: tuple[str, ...]
    dates: np.ndarray
    instruments: tuple[str, ...]
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        if len(self.factor_ids) == 0:
            raise ValueError("assembly needs at least one factor")
        dates = np.array(self.dates, dtype="datetime64[D]")
        features = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        rows = len(dates)
        if features.shape != (rows, len(self.factor_ids)):
            raise ValueError(f"features shape {features.shape} does not match "
                             f"{rows} rows x {len(self.factor_ids)} factors")
        if targets.shape != (rows,) or len(self.instruments) != rows:
            raise ValueError("row arrays disagree on length")
        if rows and not (np.isfinite(features).all() and np.isfinite(targets).all()):
            raise ValueError("assembly rows must be NaN-free")
        for name, arr in (("dates", dates), ("features", features), ("targets", targets)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "instruments", tuple(self.instruments))

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class AssembledSplits:
    train: FeatureAssembly
    valid: FeatureAssembly
    test: FeatureAssembly


@dataclass(frozen=True)
class CombinerModel:
    kind: str
    factor_ids: tuple[str, ...]
    weights: tuple[float, ...]
    intercept: float
    lam: float
    validation_ic: float | None

    def __post_init__(self) -> None:
        if self.kind not in (EQUAL_WEIGHT, RIDGE):
            raise ValueError(f"unknown combiner kind {self.kind!r}")
        if len(self.weights) != len(self.factor_ids):
            raise ValueError("one weight per factor required")
        if not all(np.isfinite(w) for w in self.weights) or not np.isfinite(self.intercept):
            raise ValueError("model parameters must be finite")


def zscore_by_day(values: np.ndarray) -> np.ndarray:
    """Cross-sectional (value - day mean) / day std per row; population std.

    Days with fewer than two finite cells, or where every finite cell is
    identical, come back all-NaN: a constant cross-section carries no
    ranking information and its std is dominated by rounding dust.
    """
    values = np.asarray(values, dtype=np.float64)
    valid = np.isfinite(values)
    values = np.where(valid, values, np.nan)
    count = valid.sum(axis=1, keepdims=True)
    filled = np.where(valid, values, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = filled.sum(axis=1, keepdims=True) / count
        dev = np.where(valid, values - mean, 0.0)
        std = np.sqrt((dev * dev).sum(axis=1, keepdims=True) / count)
        z = (values - mean) / std
    lo = np.where(valid, values, np.inf).min(axis=1, keepdims=True)
    hi = np.where(valid, values, -np.inf).max(axis=1, keepdims=True)
    z = np.where((count < 2) | (lo == hi), np.nan, z)
    return z


def _zscored_signals(factors: list[FactorRecord], panel: Panel) -> np.ndarray:
    return np.stack([zscore_by_day(evaluate(parse(r.expr_text), panel).values)
                     for r in factors])


def assemble(factors: list[FactorRecord], panel: Panel,
             returns: ForwardReturns, split: DateSplit) -> AssembledSplits:
    """Evaluate factors once over the whole panel, z-score per day, and
    flatten each split part into rows with all features and target finite."""
    if not factors:
        raise ValueError("factors must be non-empty")
    ids = tuple(r.id for r in factors)
    if len(set(ids)) != len(ids):
        raise ValueError("factor ids must be unique")
    shape = (len(panel.calendar), len(panel.universe))
    if returns.values.shape != shape:
        raise ValueError(f"returns shape {returns.values.shape} does not match panel {shape}")
    zs = _zscored_signals(factors, panel)
    usable = np.isfinite(zs).all(axis=0) & np.isfinite(returns.values)

    parts = {}
    total = 0
    for name in ("train", "valid", "test"):
        start, end = getattr(split, name)
        in_range = (panel.calendar.dates >= start) & (panel.calendar.dates < end)
        t_idx, i_idx = np.nonzero(usable & in_range[:, None])
        total += len(t_idx)
        parts[name] = FeatureAssembly(
            factor_ids=ids,
            dates=panel.calendar.dates[t_idx],
            instruments=tuple(panel.universe.instruments[i] for i in i_idx),
            features=zs[:, t_idx, i_idx].T,
            targets=returns.values[t_idx, i_idx],
        )
    if total == 0:
        raise NoUsableRows("no (date, instrument) cell has all features and target defined")
    return AssembledSplits(**parts)


def _mean_daily_pearson(assembly: FeatureAssembly,
                        weights: np.ndarray, intercept: float) -> float | None:
    """Average per-day Pearson correlation of the in-sample composite
    against targets; None when no day has enough dispersion to correlate."""
    if len(assembly) == 0:
        return None
    predicted = assembly.features @ weights + intercept
    dailies = []
    for day in np.unique(assembly.dates):
        rows = assembly.dates == day
        x, y = predicted[rows], assembly.targets[rows]
        if len(x) < _MIN_IC_ROWS:
            continue
        xd, yd = x - x.mean(), y - y.mean()
        denom = np.sqrt((xd * xd).sum() * (yd * yd).sum())
        if denom == 0.0:
            continue
        dailies.append(float((xd * yd).sum() / denom))
    return float(np.mean(dailies)) if dailies else None


def train(train_part: FeatureAssembly, valid_part: FeatureAssembly,
          kind: str = RIDGE, lam: float = 1.0) -> CombinerModel:
    """Fit the combiner on train rows; valid rows only produce the reported
    validation IC and never influence the parameters."""
    if kind not in (EQUAL_WEIGHT, RIDGE):
        raise ValueError(f"unknown combiner kind {kind!r}")
    if not np.isfinite(lam) or lam < 0:
        raise ValueError("lam must be a finite non-negative real")
    if train_part.factor_ids != valid_part.factor_ids:
        raise FactorMismatch("train and valid parts were assembled from different factors")
    k = len(train_part.factor_ids)

    if kind == EQUAL_WEIGHT:
        weights = np.full(k, 1.0 / k)
        intercept = 0.0
        lam = 0.0
    else:
        if len(train_part) < k + 1:
            raise InsufficientRows(f"ridge needs at least {k + 1} rows, got {len(train_part)}")
        design = np.hstack([train_part.features, np.ones((len(train_part), 1))])
        if lam == 0.0 and np.linalg.matrix_rank(design) < k + 1:
            raise SingularSystem("features are collinear and lam is 0")
        penalty = lam * np.diag([1.0] * k + [0.0])
        try:
            theta = np.linalg.solve(design.T @ design + penalty,
                                    design.T @ train_part.targets)
        except np.linalg.LinAlgError as err:
            raise SingularSystem(str(err)) from None
        if not np.isfinite(theta).all():
            raise SingularSystem("solution is not finite")
        weights, intercept = theta[:k], float(theta[k])

    return CombinerModel(
        kind=kind,
        factor_ids=train_part.factor_ids,
        weights=tuple(float(w) for w in weights),
        intercept=intercept,
        lam=float(lam),
        validation_ic=_mean_daily_pearson(valid_part, weights, intercept),
    )


def predict(model: CombinerModel, factors: list[FactorRecord],
            panel: Panel) -> SignalMatrix:
    """Composite score matrix: weighted sum of per-day z-scored signals plus
    intercept; NaN wherever any constituent signal is NaN."""
    ids = tuple(r.id for r in factors)
    if ids != model.factor_ids:
        raise FactorMismatch(f"model was fit on {model.factor_ids}, got {ids}")
    zs = _zscored_signals(factors, panel)
    composite = np.tensordot(np.asarray(model.weights), zs, axes=1) + model.intercept
    return SignalMatrix(panel.calendar, panel.universe, composite)


def model_to_dict(model: CombinerModel) -> dict:
    return {
        "kind": model.kind,
        "factor_ids": list(model.factor_ids),
        "weights": list(model.weights),
        "intercept": model.intercept,
        "lam": model.lam,
        "validation_ic": model.validation_ic,
    }


def model_from_dict(payload: dict) -> CombinerModel:
    return CombinerModel(
        kind=payload["kind"],
        factor_ids=tuple(payload["factor_ids"]),
        weights=tuple(float(w) for w in payload["weights"]),
        intercept=float(payload["intercept"]),
        lam=float(payload["lam"]),
        validation_ic=None if payload["validation_ic"] is None
        else float(payload["validation_ic"]),
    )


# ---------------------------------------------------------------------------
# External score matrices: long-format CSV, one row per defined cell
# ---------------------------------------------------------------------------

def write_signal_csv(signal: SignalMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("date,symbol,score\n")
        for t, date in enumerate(signal.calendar.dates):
            row = signal.values[t]
            for i, symbol in enumerate(signal.universe.instruments):
                if np.isfinite(row[i]):
                    fh.write(f"{date},{symbol},{float(row[i])!r}\n")


def read_signal_csv(path, panel: Panel) -> SignalMatrix:
    """Import an externally produced score matrix; cells absent from the
    file stay NaN. Rows must name panel dates and instruments exactly."""
    day_index = {str(d): t for t, d in enumerate(panel.calendar.dates)}
    col_index = {s: i for i, s in enumerate(panel.universe.instruments)}
    values = np.full((len(panel.calendar), len(panel.universe)), np.nan)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "date,symbol,score":
            raise MalformedPredictions(1, f"expected 'date,symbol,score' header, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 3:
                raise MalformedPredictions(lineno, f"expected 3 fields, got {len(parts)}")
            date, symbol, score = parts
            if date not in day_index:
                raise MalformedPredictions(lineno, f"date {date!r} not in panel calendar")
            if symbol not in col_index:
                raise MalformedPredictions(lineno, f"symbol {symbol!r} not in panel universe")
            try:
                score = float(score)
            except ValueError:
                raise MalformedPredictions(lineno, f"unparsable score {score!r}") from None
            t, i = day_index[date], col_index[symbol]
            if not np.isnan(values[t, i]):
                raise MalformedPredictions(lineno, f"duplicate cell ({date}, {symbol})")
            values[t, i] = score
    return SignalMatrix(panel.calendar, panel.universe, values)
