"""Command-line pipeline: synthesize or load a panel, mine factors, select
and combine the best, backtest the composite, and summarize the metrics.

Configuration lives in one TOML file with sections data / chains / llm /
thresholds / combiner / backtest plus a top-level output_dir; a handful of
flags override the common knobs. Every artifact is written to a temp file
and renamed into place, so an interrupted run never leaves partial output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields as dataclass_fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .backtest import StrategyConfig, run_backtest, write_holdings_jsonl, write_report_csv
from .chains import ChainConfig, run_mining
from .combiner import (
    EQUAL_WEIGHT,
    RIDGE,
    assemble,
    model_from_dict,
    model_to_dict,
    predict,
    train,
)
from .dsl import format_expr
from .llm import AuthMissing, BackendConfig, BackendError
from .metrics import (
    DailySeries,
    MetricConfig,
    annualized_return,
    daily_ic,
    daily_rank_ic,
    information_ratio,
    ir_of_series,
)
from .panel import DateSplit, Panel, forward_returns, load_csv, synthesize, write_csv
from .pool import FactorRecord, PoolState, Thresholds
from .pool import load as load_pool
from .pool import persist, select_top

PANEL_CSV = "panel.csv"
POOL_JSONL = "pool.jsonl"
RUN_LOG = "run_log.jsonl"
SELECTED_CSV = "selected.csv"
COMBINER_JSON = "combiner.json"
BACKTEST_CSV = "backtest.csv"
HOLDINGS_JSONL = "holdings.jsonl"
SUMMARY_CSV = "summary.csv"

SUMMARY_COLUMNS = ("IC", "RankIC", "ICIR", "RankICIR", "AR", "IR")


class ConfigInvalid(ValueError):
    """Config file problem, tagged with the offending field path."""

    def __init__(self, field: str, detail: str) -> None:
        super().__init__(f"{field}: {detail}")
        self.field = field


class UpstreamArtifactMissing(ValueError):
    """A subcommand needs output a prior stage has not produced."""


@dataclass(frozen=True)
class SynthParams:
    seed: int = 42
    days: int = 250
    instruments: int = 20
    strength: float = 0.5


@dataclass(frozen=True)
class DataConfig:
    horizon: int = 10
    csv: str | None = None
    synth: SynthParams | None = None
    split: DateSplit | None = None

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class CombinerSettings:
    kind: str = RIDGE
    lam: float = 1.0
    top_k: int = 10

    def __post_init__(self) -> None:
        if self.kind not in (EQUAL_WEIGHT, RIDGE):
            raise ValueError(f"kind must be {EQUAL_WEIGHT!r} or {RIDGE!r}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    chains: ChainConfig
    llm: BackendConfig
    thresholds: Thresholds
    combiner: CombinerSettings
    backtest: StrategyConfig
    output_dir: Path


def _build(cls, payload: dict, where: str):
    allowed = {f.name for f in dataclass_fields(cls)}
    for key in payload:
        if key not in allowed:
            raise ConfigInvalid(f"{where}.{key}", "unknown key")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as err:
        raise ConfigInvalid(where, str(err)) from None


def _parse_split(payload, where: str) -> DateSplit:
    ranges = {}
    for part in ("train", "valid", "test"):
        if part not in payload:
            raise ConfigInvalid(f"{where}.{part}", "missing range")
        bounds = payload[part]
        if not isinstance(bounds, (list, tuple)) or len(bounds) != 2:
            raise ConfigInvalid(f"{where}.{part}", "expected [start, end]")
        ranges[part] = tuple(bounds)
    extra = set(payload) - set(ranges)
    if extra:
        raise ConfigInvalid(f"{where}.{sorted(extra)[0]}", "unknown key")
    try:
        return DateSplit(**ranges)
    except ValueError as err:
        raise ConfigInvalid(where, str(err)) from None


def _parse_data(payload: dict) -> DataConfig:
    payload = dict(payload)
    synth = payload.pop("synth", None)
    split = payload.pop("split", None)
    base = _build(DataConfig, payload, "data")
    if (base.csv is None) == (synth is None):
        raise ConfigInvalid("data", "exactly one of csv / [data.synth] is required")
    return replace(
        base,
        synth=None if synth is None else _build(SynthParams, synth, "data.synth"),
        split=None if split is None else _parse_split(split, "data.split"),
    )


def _parse_backtest(payload: dict) -> StrategyConfig:
    payload = dict(payload)
    benchmark_csv = payload.pop("benchmark_csv", None)
    cfg = _build(StrategyConfig, payload, "backtest")
    if benchmark_csv is not None:
        return replace(cfg, benchmark=_read_series_csv(Path(benchmark_csv)))
    return cfg


def load_run_config(path: Path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigInvalid(str(path), f"not valid TOML: {err}") from None
    known = {"output_dir", "data", "chains", "llm", "thresholds", "combiner", "backtest"}
    for key in raw:
        if key not in known:
            raise ConfigInvalid(key, "unknown section")
    if "data" not in raw:
        raise ConfigInvalid("data", "section is required")
    return RunConfig(
        data=_parse_data(raw["data"]),
        chains=_build(ChainConfig, raw.get("chains", {}), "chains"),
        llm=_build(BackendConfig, raw.get("llm", {}), "llm"),
        thresholds=_build(Thresholds, raw.get("thresholds", {}), "thresholds"),
        combiner=_build(CombinerSettings, raw.get("combiner", {}), "combiner"),
        backtest=_parse_backtest(raw.get("backtest", {})),
        output_dir=Path(raw.get("output_dir", "out")),
    )


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    chains, llm, data = cfg.chains, cfg.llm, cfg.data
    if args.budget is not None:
        chains = replace(chains, total_budget=args.budget)
    if args.parallel is not None:
        chains = replace(chains, max_parallel_opt_chains=args.parallel)
    if args.seed is not None:
        chains = replace(chains, rng_seed=args.seed)
        if data.synth is not None:
            data = replace(data, synth=replace(data.synth, seed=args.seed))
    if args.backend is not None:
        llm = replace(llm, kind=args.backend)
    out = args.output_dir if args.output_dir is not None else cfg.output_dir
    return replace(cfg, chains=chains, llm=llm, data=data, output_dir=out)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _atomic(path: Path, write) -> None:
    """write(tmp) then rename, so readers never observe a partial file."""
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def _read_series_csv(path: Path) -> DailySeries:
    if not path.exists():
        raise UpstreamArtifactMissing(str(path))
    dates, values = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        columns = header.split(",")
        if len(columns) < 2 or columns[0] != "date":
            raise ConfigInvalid(str(path), f"expected a date,value series, got {header!r}")
        for line in fh:
            cells = line.rstrip("\n").split(",")
            dates.append(cells[0])
            values.append(float(cells[1]))
    return DailySeries(np.array(dates, dtype="datetime64[D]"), np.array(values))


def _load_panel(cfg: RunConfig) -> Panel:
    if cfg.data.csv is not None:
        path = Path(cfg.data.csv)
        if not path.exists():
            raise UpstreamArtifactMissing(f"panel csv {path} does not exist")
        return load_csv(path)
    s = cfg.data.synth
    panel, _ = synthesize(seed=s.seed, T=s.days, n=s.instruments, signal_strength=s.strength)
    return panel


def _split_for(cfg: RunConfig, panel: Panel) -> DateSplit:
    if cfg.data.split is not None:
        return cfg.data.split
    d = panel.calendar.dates
    i1, i2 = int(len(d) * 0.6), int(len(d) * 0.8)
    if not 0 < i1 < i2 < len(d):
        raise ConfigInvalid("data.split", f"panel with {len(d)} days is too short to split")
    return DateSplit((d[0], d[i1]), (d[i1], d[i2]), (d[i2], d[-1] + np.timedelta64(1, "D")))


def _require_pool(out: Path) -> PoolState:
    path = out / POOL_JSONL
    if not path.exists():
        raise UpstreamArtifactMissing(f"{path} (run mine first)")
    return load_pool(path)


def _selected_factors(cfg: RunConfig, pool: PoolState) -> list[FactorRecord]:
    selected = select_top(pool, cfg.combiner.top_k)
    if not selected:
        raise UpstreamArtifactMissing("pool has no effective factors to combine")
    return selected


def _load_model(out: Path):
    path = out / COMBINER_JSON
    if not path.exists():
        raise UpstreamArtifactMissing(f"{path} (run train first)")
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def _factors_by_id(pool: PoolState, ids: tuple[str, ...]) -> list[FactorRecord]:
    effective, deprecated = pool.snapshot()
    lookup = {r.id: r for r in (*effective, *deprecated)}
    missing = [i for i in ids if i not in lookup]
    if missing:
        raise UpstreamArtifactMissing(f"pool lacks factor ids {missing} used by the model")
    return [lookup[i] for i in ids]


def _require_key(backend: BackendConfig) -> None:
    if backend.kind == "http" and not os.environ.get(backend.api_key_env):
        raise AuthMissing(f"environment variable {backend.api_key_env} is not set")


def _composite_signal(cfg: RunConfig, panel: Panel):
    pool = _require_pool(cfg.output_dir)
    model = _load_model(cfg.output_dir)
    factors = _factors_by_id(pool, model.factor_ids)
    return predict(model, factors, panel)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    s = cfg.data.synth
    if s is None:
        raise ConfigInvalid("data.synth", "synth subcommand needs synthetic data params")
    panel, planted = synthesize(seed=s.seed, T=s.days, n=s.instruments,
                                signal_strength=s.strength)
    path = cfg.output_dir / PANEL_CSV
    _atomic(path, lambda p: write_csv(panel, p))
    print(f"wrote {path}: {s.days} days x {s.instruments} instruments "
          f"(planted {format_expr(planted)})")
    return 0


def cmd_mine(cfg: RunConfig) -> int:
    _require_key(cfg.llm)
    panel = _load_panel(cfg)
    returns = forward_returns(panel, cfg.data.horizon)
    result = run_mining(panel, returns, cfg.llm, cfg.chains, thresholds=cfg.thresholds)
    out = cfg.output_dir
    _atomic(out / POOL_JSONL, lambda p: persist(result.pool, p))

    def write_log(path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for entry in result.events:
                fh.write(json.dumps(entry, separators=(",", ":")) + "\n")

    _atomic(out / RUN_LOG, write_log)
    effective, deprecated = result.pool.snapshot()
    print(f"spent {result.candidates_spent} completions over {result.seeds_generated} "
          f"seeds: {len(effective)} effective, {len(deprecated)} deprecated")
    return 0


def cmd_select(cfg: RunConfig) -> int:
    pool = _require_pool(cfg.output_dir)
    selected = select_top(pool, cfg.combiner.top_k)

    def write(path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("id,expr,strength,consistency,efficiency,diversity,status\n")
            for r in selected:
                s = r.score
                fh.write(f'{r.id},"{r.expr_text}",{s.strength!r},{s.consistency!r},'
                         f"{s.efficiency!r},{s.diversity!r},{r.status}\n")

    path = cfg.output_dir / SELECTED_CSV
    _atomic(path, write)
    print(f"wrote {path}: {len(selected)} factors")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    pool = _require_pool(cfg.output_dir)
    factors = _selected_factors(cfg, pool)
    panel = _load_panel(cfg)
    returns = forward_returns(panel, cfg.data.horizon)
    parts = assemble(factors, panel, returns, _split_for(cfg, panel))
    model = train(parts.train, parts.valid, cfg.combiner.kind, cfg.combiner.lam)
    path = cfg.output_dir / COMBINER_JSON
    _atomic(path, lambda p: Path(p).write_text(
        json.dumps(model_to_dict(model), indent=2, sort_keys=True) + "\n",
        encoding="utf-8"))
    shown = "n/a" if model.validation_ic is None else f"{model.validation_ic:+.4f}"
    print(f"wrote {path}: {model.kind} over {len(model.factor_ids)} factors, "
          f"validation IC {shown}")
    return 0


def cmd_backtest(cfg: RunConfig) -> int:
    panel = _load_panel(cfg)
    signal = _composite_signal(cfg, panel)
    report = run_backtest(signal, panel, cfg.backtest)
    out = cfg.output_dir
    _atomic(out / BACKTEST_CSV, lambda p: write_report_csv(report, p))
    _atomic(out / HOLDINGS_JSONL, lambda p: write_holdings_jsonl(report, p))
    print(f"wrote {out / BACKTEST_CSV}: AR {report.ar:+.4f}, IR {report.ir:+.4f}, "
          f"turnover {report.realized_turnover:.4f}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    out = cfg.output_dir
    backtest_path = out / BACKTEST_CSV
    if not backtest_path.exists():
        raise UpstreamArtifactMissing(f"{backtest_path} (run backtest first)")
    panel = _load_panel(cfg)
    signal = _composite_signal(cfg, panel)
    returns = forward_returns(panel, cfg.data.horizon)
    metric_cfg = MetricConfig()
    ic = daily_ic(signal, returns, metric_cfg)
    rank_ic = daily_rank_ic(signal, returns, metric_cfg)
    net = _read_series_csv(backtest_path)
    row = {
        "IC": float(ic.values.mean()),
        "RankIC": float(rank_ic.values.mean()),
        "ICIR": ir_of_series(ic),
        "RankICIR": ir_of_series(rank_ic),
        "AR": annualized_return(net, metric_cfg),
        "IR": information_ratio(net, metric_cfg),
    }

    def write(path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(SUMMARY_COLUMNS) + "\n")
            fh.write(",".join(repr(row[c]) for c in SUMMARY_COLUMNS) + "\n")

    _atomic(out / SUMMARY_CSV, write)
    print(f"wrote {out / SUMMARY_CSV}: " +
          ", ".join(f"{c} {row[c]:+.4f}" for c in SUMMARY_COLUMNS))
    return 0


def cmd_run_all(cfg: RunConfig) -> int:
    if cfg.data.synth is not None:
        cmd_synth(cfg)
    for step in (cmd_mine, cmd_select, cmd_train, cmd_backtest, cmd_report):
        code = step(cfg)
        if code != 0:
            return code
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "mine": cmd_mine,
    "select": cmd_select,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "report": cmd_report,
    "run-all": cmd_run_all,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alphachain",
        description="Mine, combine, and backtest formulaic alpha factors.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, type=Path,
                        help="TOML run configuration")
    parser.add_argument("--output-dir", type=Path, default=None,
                        help="override the config's output_dir")
    parser.add_argument("--seed", type=int, default=None,
                        help="override chain rng seed (and synth seed)")
    parser.add_argument("--backend", choices=("http", "mock"), default=None,
                        help="override llm.kind")
    parser.add_argument("--budget", type=int, default=None,
                        help="override chains.total_budget")
    parser.add_argument("--parallel", type=int, default=None, metavar="N",
                        help="override chains.max_parallel_opt_chains")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if not args.config.exists():
            raise ConfigInvalid(str(args.config), "config file does not exist")
        cfg = _apply_overrides(load_run_config(args.config), args)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg)
    except (ValueError, OSError, BackendError) as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
