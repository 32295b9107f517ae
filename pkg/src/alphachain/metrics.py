"""Cross-sectional factor quality metrics.

Every metric that aggregates over time first reduces each trading day to a
single number (a correlation, a set difference, a return) and then averages
over days. Days where the statistic is undefined (too few valid pairs, a
constant cross-section) are dropped rather than recorded as NaN, so the
temporal averages are always taken over well-defined values only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .engine import SignalMatrix
from .panel import ForwardReturns


class ShapeMismatch(ValueError):
    pass


class SeriesTooShort(ValueError):
    pass


class ZeroDispersion(ValueError):
    pass


class InsufficientDays(ValueError):
    pass


class EmptySeries(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    """Knobs shared across metrics.

    min_valid_pairs: smallest cross-section a per-day correlation is trusted on.
    k_fraction: top set size for turnover, as a fraction of the universe.
    periods_per_year: annualization factor (252 trading days).
    diversity_k: how many of the most correlated pool members dilute diversity.
    """

    min_valid_pairs: int = 3
    k_fraction: float = 0.10
    periods_per_year: int = 252
    diversity_k: int = 1

    def __post_init__(self) -> None:
        if self.min_valid_pairs < 2:
            raise ValueError("min_valid_pairs must be >= 2")
        if not 0.0 < self.k_fraction <= 1.0:
            raise ValueError("k_fraction must be in (0, 1]")
        if self.periods_per_year < 1:
            raise ValueError("periods_per_year must be >= 1")
        if self.diversity_k < 1:
            raise ValueError("diversity_k must be >= 1")


@dataclass(frozen=True)
class DailySeries:
    """One finite value per retained trading day, dates ascending."""

    dates: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        dates = np.array(self.dates, dtype="datetime64[D]")
        values = np.asarray(self.values, dtype=np.float64).copy()
        if dates.shape != values.shape or dates.ndim != 1:
            raise ValueError("dates and values must be 1-d arrays of equal length")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise ValueError("dates must be unique and ascending")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite; drop undefined days instead")
        dates.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.dates)


def write_series_csv(series: DailySeries, path) -> None:
    """Two-column CSV (date,value); values as shortest round-trip reprs."""
    lines = ["date,value"]
    for d, v in zip(series.dates, series.values):
        lines.append(f"{d},{float(v)!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _valid_mask(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return ~(np.isnan(x) | np.isnan(y))


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson correlation, or None when either side has no dispersion."""
    xc = x - x.mean()
    yc = y - y.mean()
    ssx = float((xc * xc).sum())
    ssy = float((yc * yc).sum())
    if ssx == 0.0 or ssy == 0.0:
        return None
    return float((xc * yc).sum() / math.sqrt(ssx * ssy))


def _daily_correlations(
    signal: SignalMatrix,
    returns: ForwardReturns,
    cfg: MetricConfig,
    rank_first: bool,
) -> DailySeries:
    if signal.values.shape != returns.values.shape:
        raise ShapeMismatch(
            f"signal shape {signal.values.shape} vs returns {returns.values.shape}"
        )
    dates: list[np.datetime64] = []
    vals: list[float] = []
    for t in range(signal.values.shape[0]):
        x = signal.values[t]
        y = returns.values[t]
        keep = _valid_mask(x, y)
        if int(keep.sum()) < cfg.min_valid_pairs:
            continue
        x, y = x[keep], y[keep]
        if rank_first:
            x = rankdata(x, method="average")
            y = rankdata(y, method="average")
        rho = _pearson(x, y)
        if rho is None:
            continue
        dates.append(signal.calendar.dates[t])
        vals.append(rho)
    return DailySeries(np.array(dates, dtype="datetime64[D]"), np.array(vals))


def daily_ic(
    signal: SignalMatrix, returns: ForwardReturns, cfg: MetricConfig
) -> DailySeries:
    """Per-day Pearson correlation between signal and forward returns.

    A day is retained only when at least min_valid_pairs instruments have
    both a signal and a return, and neither side is cross-sectionally
    constant.
    """
    return _daily_correlations(signal, returns, cfg, rank_first=False)


def daily_rank_ic(
    signal: SignalMatrix, returns: ForwardReturns, cfg: MetricConfig
) -> DailySeries:
    """Per-day Spearman correlation: average ranks on both sides, then Pearson."""
    return _daily_correlations(signal, returns, cfg, rank_first=True)


def ir_of_series(series: DailySeries) -> float:
    """Temporal mean / sample standard deviation of a daily series.

    Serves both the IC and the rank-IC information ratios; the input decides
    which one is being computed.
    """
    if len(series) < 2:
        raise SeriesTooShort(f"need >= 2 days, got {len(series)}")
    std = float(series.values.std(ddof=1))
    # a constant series has zero dispersion even when its float mean rounds
    # away from the shared value and leaves dust in the deviations
    if std == 0.0 or series.values.min() == series.values.max():
        raise ZeroDispersion("series has zero temporal dispersion")
    return float(series.values.mean()) / std


def _top_k_set(values: np.ndarray, instruments: tuple[str, ...], k: int) -> frozenset[int]:
    # descending value, ties broken by ascending instrument identifier
    valid = np.flatnonzero(~np.isnan(values))
    order = sorted(valid, key=lambda i: (-values[i], instruments[i]))
    return frozenset(order[:k])


def factor_turnover(signal: SignalMatrix, cfg: MetricConfig) -> float:
    """Mean size of the symmetric difference between consecutive top-k sets,
    normalized by k. 0 = frozen ranking, 2 = full replacement every day.

    k = max(1, floor(k_fraction * universe size)); days holding fewer than k
    valid signals are skipped entirely.
    """
    n = len(signal.universe)
    k = max(1, math.floor(cfg.k_fraction * n))
    instruments = signal.universe.instruments
    tops: list[frozenset[int]] = []
    for t in range(signal.values.shape[0]):
        row = signal.values[t]
        if int((~np.isnan(row)).sum()) < k:
            continue
        tops.append(_top_k_set(row, instruments, k))
    if len(tops) < 2:
        raise InsufficientDays(f"need >= 2 usable days, got {len(tops)}")
    diffs = [len(a ^ b) / k for a, b in zip(tops, tops[1:])]
    return float(np.mean(diffs))


def _mean_daily_spearman(
    a: SignalMatrix, b: SignalMatrix, cfg: MetricConfig
) -> float:
    """Mean over retained days of the cross-sectional Spearman correlation.

    0.0 when no day yields a defined correlation: two factors that never
    overlap carry no evidence of redundancy.
    """
    vals: list[float] = []
    for t in range(a.values.shape[0]):
        x, y = a.values[t], b.values[t]
        keep = _valid_mask(x, y)
        if int(keep.sum()) < cfg.min_valid_pairs:
            continue
        rx = rankdata(x[keep], method="average")
        ry = rankdata(y[keep], method="average")
        rho = _pearson(rx, ry)
        if rho is not None:
            vals.append(rho)
    return float(np.mean(vals)) if vals else 0.0


def diversity(
    candidate: SignalMatrix, pool: list[SignalMatrix], cfg: MetricConfig
) -> float:
    """1 minus the mean of the diversity_k largest absolute mean daily
    Spearman correlations against the pool; 1.0 for an empty pool.

    With the default diversity_k = 1 this is 1 - max |rho|: a candidate is
    only as novel as its distance from its nearest neighbour.
    """
    if not pool:
        return 1.0
    for member in pool:
        if member.values.shape != candidate.values.shape:
            raise ShapeMismatch("pool member shape differs from candidate")
    rhos = sorted(
        (abs(_mean_daily_spearman(candidate, member, cfg)) for member in pool),
        reverse=True,
    )
    top = rhos[: min(cfg.diversity_k, len(rhos))]
    return 1.0 - float(np.mean(top))


def annualized_return(daily_returns: DailySeries, cfg: MetricConfig) -> float:
    """Arithmetic mean daily return scaled to periods_per_year."""
    if len(daily_returns) == 0:
        raise EmptySeries("cannot annualize an empty series")
    return float(daily_returns.values.mean()) * cfg.periods_per_year


def information_ratio(daily_returns: DailySeries, cfg: MetricConfig) -> float:
    """Annualized return over annualized volatility: mean * sqrt(P) / std."""
    if len(daily_returns) < 2:
        raise SeriesTooShort(f"need >= 2 days, got {len(daily_returns)}")
    std = float(daily_returns.values.std(ddof=1))
    if std == 0.0 or daily_returns.values.min() == daily_returns.values.max():
        raise ZeroDispersion("daily returns have zero dispersion")
    mean = float(daily_returns.values.mean())
    return mean * math.sqrt(cfg.periods_per_year) / std
