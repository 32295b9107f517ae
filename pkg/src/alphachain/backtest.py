"""Daily-rebalanced long-only top-k strategy with a drop-n trade cap.

Scores at day t drive trades executed at that day's close; the resulting
portfolio earns close-to-close returns realized on day t+1, net of an
opening charge on bought weight and a closing charge on sold weight. All
decisions are ordinal in the scores, so any strictly increasing per-day
transform of the score matrix reproduces the same holdings and report.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import SignalMatrix
from .metrics import (
    DailySeries,
    MetricConfig,
    ShapeMismatch,
    ZeroDispersion,
    annualized_return,
    information_ratio,
)
from .panel import Panel


class TooFewDays(ValueError):
    """Panel shorter than the strategy horizon allows."""


class NoOverlap(ValueError):
    """Strategy and benchmark series share no dates."""


@dataclass(frozen=True)
class StrategyConfig:
    k_fraction: float = 0.10
    horizon: int = 10
    open_cost: float = 0.0003
    close_cost: float = 0.001
    instant_fill: bool = False
    benchmark: DailySeries | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.k_fraction <= 1.0:
            raise ValueError("k_fraction must be in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.open_cost < 0 or self.close_cost < 0:
            raise ValueError("costs must be non-negative")


@dataclass(frozen=True)
class DayTrades:
    """Holdings after the close-of-day rebalance plus what moved."""

    date: str
    held: tuple[str, ...]
    bought: tuple[str, ...]
    sold: tuple[str, ...]
    forced: tuple[str, ...]


@dataclass(frozen=True)
class BacktestReport:
    daily_returns: DailySeries
    gross_returns: np.ndarray
    cost_drags: np.ndarray
    cumulative: DailySeries
    excess_cumulative: DailySeries
    ar: float
    ir: float
    realized_turnover: float
    holdings: tuple[DayTrades, ...] = field(repr=False)


def _compound(values: np.ndarray) -> np.ndarray:
    return np.cumprod(1.0 + values) - 1.0


def _close_returns(panel: Panel) -> np.ndarray:
    """close(t)/close(t-1) - 1 per instrument; row 0 and gaps are NaN."""
    close = panel.fields["close"]
    out = np.full_like(close, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        out[1:] = close[1:] / close[:-1] - 1.0
    return out


def equal_weight_benchmark(panel: Panel) -> DailySeries:
    """Daily mean of instrument close-to-close returns from day 1 on."""
    rets = _close_returns(panel)[1:]
    valid = np.isfinite(rets)
    count = valid.sum(axis=1)
    with np.errstate(invalid="ignore"):
        means = np.where(valid, rets, 0.0).sum(axis=1) / np.maximum(count, 1)
    means[count == 0] = 0.0
    return DailySeries(panel.calendar.dates[1:], means)


def run_backtest(scores: SignalMatrix, panel: Panel,
                 cfg: StrategyConfig | None = None) -> BacktestReport:
    """Simulate the strategy over the panel and report net performance.

    Per rebalance day: eligible names have a finite score and a finite
    close; k = max(1, floor(k_fraction * #eligible)) and n = ceil(k /
    horizon). The top k eligible names by (score desc, id asc) form the
    target; held names outside it sell worst-score first up to n, and the
    best unheld target names buy up to both n and the free slots under k.
    Held names whose price disappears are force-sold outside the n cap,
    still paying the closing charge. The report's series start the day
    after the first rebalance with any eligible name.
    """
    cfg = cfg or StrategyConfig()
    shape = (len(panel.calendar), len(panel.universe))
    if scores.values.shape != shape:
        raise ShapeMismatch(f"scores shape {scores.values.shape} does not match panel {shape}")
    if len(panel.calendar) < cfg.horizon + 2:
        raise TooFewDays(f"need at least {cfg.horizon + 2} days, got {len(panel.calendar)}")

    symbols = panel.universe.instruments
    close = panel.fields["close"]
    rets = _close_returns(panel)
    values = scores.values

    held: set[int] = set()
    first_active: int | None = None
    dates, gross_list, cost_list = [], [], []
    log: list[DayTrades] = []
    flips: list[float] = []
    prev_held: frozenset[int] | None = None

    for t in range(len(panel.calendar) - 1):
        score_t = values[t]
        priced = np.isfinite(close[t])
        eligible = [i for i in range(len(symbols))
                    if np.isfinite(score_t[i]) and priced[i]]

        h_before = len(held)
        forced = sorted(i for i in held if not priced[i])
        held -= set(forced)

        bought: list[int] = []
        sold: list[int] = []
        if eligible:
            if first_active is None:
                first_active = t
            k = max(1, math.floor(cfg.k_fraction * len(eligible)))
            n = math.ceil(k / cfg.horizon)
            by_rank = sorted(eligible, key=lambda i: (-score_t[i], symbols[i]))
            target = set(by_rank[:k])

            # NaN-scored holdings leave first, then ascending score, then id
            def leaver_key(i):
                finite = bool(np.isfinite(score_t[i]))
                return (finite, float(score_t[i]) if finite else 0.0, symbols[i])

            leavers = sorted((i for i in held if i not in target), key=leaver_key)
            sold = leavers[:n]
            held -= set(sold)

            buy_cap = k if (cfg.instant_fill and not held) else n
            room = k - len(held)
            wanted = [i for i in by_rank if i in target and i not in held]
            bought = wanted[:max(0, min(buy_cap, room))]
            held |= set(bought)

            if prev_held is not None:
                flips.append(len(frozenset(held) ^ prev_held) / k)
            prev_held = frozenset(held)

        if first_active is None:
            continue

        h_after = len(held)
        cost = 0.0
        if h_before:
            cost += cfg.close_cost * (len(forced) + len(sold)) / h_before
        if h_after:
            cost += cfg.open_cost * len(bought) / h_after

        day_rets = rets[t + 1, sorted(held)] if held else np.array([])
        gross = float(np.where(np.isfinite(day_rets), day_rets, 0.0).mean()) if held else 0.0

        dates.append(panel.calendar.dates[t + 1])
        gross_list.append(gross)
        cost_list.append(cost)
        log.append(DayTrades(
            date=str(panel.calendar.dates[t]),
            held=tuple(sorted(symbols[i] for i in held)),
            bought=tuple(sorted(symbols[i] for i in bought)),
            sold=tuple(sorted(symbols[i] for i in sold)),
            forced=tuple(sorted(symbols[i] for i in forced)),
        ))

    if first_active is None:
        raise TooFewDays("no day has an eligible instrument to trade")

    gross_arr = np.asarray(gross_list)
    cost_arr = np.asarray(cost_list)
    net = DailySeries(np.array(dates), gross_arr - cost_arr)

    benchmark = cfg.benchmark if cfg.benchmark is not None else equal_weight_benchmark(panel)
    excess = excess_series(net, benchmark)

    metric_cfg = MetricConfig()
    try:
        ir = information_ratio(net, metric_cfg)
    except (ZeroDispersion, ValueError):
        ir = float("nan")
    return BacktestReport(
        daily_returns=net,
        gross_returns=gross_arr,
        cost_drags=cost_arr,
        cumulative=DailySeries(net.dates, _compound(net.values)),
        excess_cumulative=excess,
        ar=annualized_return(net, metric_cfg),
        ir=ir,
        realized_turnover=float(np.mean(flips)) if flips else 0.0,
        holdings=tuple(log),
    )


def excess_series(strategy: DailySeries, benchmark: DailySeries) -> DailySeries:
    """Compounded (strategy - benchmark) over their shared dates."""
    shared, s_idx, b_idx = np.intersect1d(strategy.dates, benchmark.dates,
                                          return_indices=True)
    if len(shared) == 0:
        raise NoOverlap("strategy and benchmark dates are disjoint")
    diff = strategy.values[s_idx] - benchmark.values[b_idx]
    return DailySeries(shared, _compound(diff))


def write_report_csv(report: BacktestReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("date,net_return,cumulative,excess_cumulative\n")
        excess = dict(zip(report.excess_cumulative.dates.tolist(),
                          report.excess_cumulative.values))
        for i, date in enumerate(report.daily_returns.dates):
            e = excess.get(date.tolist())
            fh.write(f"{date},{float(report.daily_returns.values[i])!r},"
                     f"{float(report.cumulative.values[i])!r},"
                     f"{'' if e is None else repr(float(e))}\n")


def write_holdings_jsonl(report: BacktestReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in report.holdings:
            fh.write(json.dumps({
                "date": entry.date,
                "held": list(entry.held),
                "bought": list(entry.bought),
                "sold": list(entry.sold),
                "forced": list(entry.forced),
            }, separators=(",", ":")) + "\n")
