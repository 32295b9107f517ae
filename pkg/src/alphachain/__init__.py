"""Formulaic alpha mining: expression DSL, panel evaluation, chained
generation and refinement, signal combination, and cost-aware backtesting."""

from .backtest import BacktestReport, StrategyConfig, equal_weight_benchmark, run_backtest
from .chains import ChainConfig, MiningResult, run_mining
from .cli import main
from .combiner import CombinerModel, assemble, predict, train
from .dsl import ExprLimits, canonical_hash, format_expr, parse, validate, warmup_rows
from .engine import SignalMatrix, evaluate
from .llm import BackendConfig, complete, mock_generate
from .metrics import (
    DailySeries,
    MetricConfig,
    annualized_return,
    daily_ic,
    daily_rank_ic,
    diversity,
    factor_turnover,
    information_ratio,
)
from .panel import (
    DateSplit,
    ForwardReturns,
    Panel,
    TradingCalendar,
    Universe,
    forward_returns,
    load_csv,
    synthesize,
)
from .pool import (
    FactorRecord,
    PoolState,
    Score,
    Thresholds,
    admit,
    check,
    evaluate_factor,
    select_top,
)

__version__ = "0.1.0"

__all__ = [
    "BacktestReport",
    "BackendConfig",
    "ChainConfig",
    "CombinerModel",
    "DailySeries",
    "DateSplit",
    "ExprLimits",
    "FactorRecord",
    "ForwardReturns",
    "MetricConfig",
    "MiningResult",
    "Panel",
    "PoolState",
    "Score",
    "SignalMatrix",
    "StrategyConfig",
    "Thresholds",
    "TradingCalendar",
    "Universe",
    "admit",
    "annualized_return",
    "assemble",
    "canonical_hash",
    "check",
    "complete",
    "daily_ic",
    "daily_rank_ic",
    "diversity",
    "equal_weight_benchmark",
    "evaluate",
    "evaluate_factor",
    "factor_turnover",
    "format_expr",
    "forward_returns",
    "information_ratio",
    "load_csv",
    "main",
    "mock_generate",
    "parse",
    "predict",
    "run_backtest",
    "run_mining",
    "select_top",
    "synthesize",
    "train",
    "validate",
    "warmup_rows",
]
