"""Metric contracts checked against closed forms and brute-force oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from alphachain.engine import SignalMatrix
from alphachain.metrics import (
    DailySeries,
    EmptySeries,
    InsufficientDays,
    MetricConfig,
    SeriesTooShort,
    ShapeMismatch,
    ZeroDispersion,
    annualized_return,
    daily_ic,
    daily_rank_ic,
    diversity,
    factor_turnover,
    information_ratio,
    ir_of_series,
    write_series_csv,
)
from alphachain.panel import ForwardReturns, TradingCalendar, Universe

CFG = MetricConfig()


def make_calendar(T):
    return TradingCalendar(np.datetime64("2020-01-01") + np.arange(T))


def make_universe(n):
    return Universe(tuple(f"S{i:03d}" for i in range(n)))


def signal_of(values):
    values = np.asarray(values, dtype=float)
    T, n = values.shape
    return SignalMatrix(make_calendar(T), make_universe(n), values)


def returns_of(values, horizon=1):
    return ForwardReturns(horizon, np.asarray(values, dtype=float))


def random_case(seed, T=50, n=20, nan_frac=0.05):
    rng = np.random.default_rng(seed)
    sig = rng.normal(size=(T, n))
    ret = 0.3 * sig + rng.normal(size=(T, n))
    for a in (sig, ret):
        a[rng.random((T, n)) < nan_frac] = np.nan
    return signal_of(sig), returns_of(ret)


def oracle_daily_pearson(sig, ret, cfg, rank_first):
    """Brute-force day loop using library correlation routines."""
    out = {}
    for t in range(sig.values.shape[0]):
        x, y = sig.values[t], ret.values[t]
        keep = ~(np.isnan(x) | np.isnan(y))
        if keep.sum() < cfg.min_valid_pairs:
            continue
        x, y = x[keep], y[keep]
        if rank_first:
            x = stats.rankdata(x)
            y = stats.rankdata(y)
        if x.min() == x.max() or y.min() == y.max():
            continue
        out[sig.calendar.dates[t]] = np.corrcoef(x, y)[0, 1]
    return out


class TestDailySeries:
    def test_rejects_nan_values(self):
        with pytest.raises(ValueError):
            DailySeries(np.array(["2020-01-01"], dtype="datetime64[D]"), [np.nan])

    def test_rejects_unsorted_dates(self):
        dates = np.array(["2020-01-02", "2020-01-01"], dtype="datetime64[D]")
        with pytest.raises(ValueError):
            DailySeries(dates, [0.1, 0.2])

    def test_rejects_length_mismatch(self):
        dates = np.array(["2020-01-01"], dtype="datetime64[D]")
        with pytest.raises(ValueError):
            DailySeries(dates, [0.1, 0.2])

    def test_csv_round_trips_exactly(self, tmp_path):
        rng = np.random.default_rng(5)
        dates = np.datetime64("2021-03-01") + np.arange(7)
        series = DailySeries(dates, rng.normal(size=7))
        path = tmp_path / "series.csv"
        write_series_csv(series, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "date,value"
        got = [float(line.split(",")[1]) for line in lines[1:]]
        assert got == list(series.values)


class TestMetricConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"min_valid_pairs": 1},
            {"k_fraction": 0.0},
            {"k_fraction": 1.5},
            {"periods_per_year": 0},
            {"diversity_k": 0},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            MetricConfig(**kwargs)


class TestDailyIC:
    def test_signal_equal_to_returns_gives_one(self):
        sig, ret = random_case(0)
        series = daily_ic(signal_of(ret.values), ret, CFG)
        assert len(series) > 0
        assert np.allclose(series.values, 1.0, atol=1e-12)

    def test_negated_signal_gives_minus_one(self):
        sig, ret = random_case(1)
        series = daily_ic(signal_of(-ret.values), ret, CFG)
        assert np.allclose(series.values, -1.0, atol=1e-12)

    def test_matches_brute_force_oracle(self):
        for seed in range(30):
            sig, ret = random_case(seed)
            series = daily_ic(sig, ret, CFG)
            want = oracle_daily_pearson(sig, ret, CFG, rank_first=False)
            assert list(series.dates) == list(want)
            for got, expected in zip(series.values, want.values()):
                assert abs(got - expected) <= 1e-9

    def test_sparse_day_dropped(self):
        sig = np.full((3, 5), np.nan)
        ret = np.zeros((3, 5))
        sig[0] = [1, 2, 3, 4, 5]
        ret[0] = [2, 4, 6, 8, 10]
        sig[1, :2] = [1.0, 2.0]  # two valid pairs < min_valid_pairs
        ret[1] = 1.0
        series = daily_ic(signal_of(sig), returns_of(ret), CFG)
        assert len(series) == 0 or np.all(series.dates == make_calendar(3).dates[0])

    def test_constant_side_dropped(self):
        sig = np.tile([1.0, 1.0, 1.0, 1.0], (2, 1))
        ret = np.array([[0.1, 0.2, 0.3, 0.4]] * 2)
        assert len(daily_ic(signal_of(sig), returns_of(ret), CFG)) == 0
        assert len(daily_ic(signal_of(ret), returns_of(sig), CFG)) == 0

    def test_shape_mismatch_raises(self):
        sig, _ = random_case(2)
        with pytest.raises(ShapeMismatch):
            daily_ic(sig, returns_of(np.zeros((10, 3))), CFG)

    def test_affine_transform_invariance(self):
        sig, ret = random_case(3)
        base = daily_ic(sig, ret, CFG)
        scaled = daily_ic(signal_of(2.5 * sig.values + 7.0), ret, CFG)
        assert np.allclose(base.values, scaled.values, atol=1e-12)

    def test_column_permutation_equivariance(self):
        sig, ret = random_case(4)
        perm = np.random.default_rng(4).permutation(sig.values.shape[1])
        a = daily_ic(sig, ret, CFG)
        b = daily_ic(
            signal_of(sig.values[:, perm]), returns_of(ret.values[:, perm]), CFG
        )
        assert np.allclose(a.values, b.values, atol=1e-12)


class TestDailyRankIC:
    def test_monotone_transform_of_returns_gives_one(self):
        _, ret = random_case(5)
        series = daily_rank_ic(signal_of(np.exp(ret.values)), ret, CFG)
        assert len(series) > 0
        assert np.allclose(series.values, 1.0, atol=1e-12)

    def test_constant_cross_section_dropped(self):
        sig = np.ones((4, 6))
        ret = np.cumsum(np.ones((4, 6)), axis=1)
        assert len(daily_rank_ic(signal_of(sig), returns_of(ret), CFG)) == 0

    def test_matches_spearman_oracle(self):
        for seed in range(30):
            sig, ret = random_case(seed + 100)
            series = daily_rank_ic(sig, ret, CFG)
            t_index = {d: i for i, d in enumerate(sig.calendar.dates)}
            for d, got in zip(series.dates, series.values):
                x, y = sig.values[t_index[d]], ret.values[t_index[d]]
                keep = ~(np.isnan(x) | np.isnan(y))
                expected = stats.spearmanr(x[keep], y[keep]).statistic
                assert abs(got - expected) <= 1e-9

    def test_ties_use_average_ranks(self):
        sig = np.array([[1.0, 1.0, 2.0, 3.0]])
        ret = np.array([[0.4, 0.1, 0.2, 0.3]])
        got = daily_rank_ic(signal_of(sig), returns_of(ret), CFG)
        rx = stats.rankdata(sig[0])
        ry = stats.rankdata(ret[0])
        assert got.values[0] == pytest.approx(np.corrcoef(rx, ry)[0, 1], abs=1e-12)


class TestIRofSeries:
    def test_zero_dispersion(self):
        dates = make_calendar(3).dates
        with pytest.raises(ZeroDispersion):
            ir_of_series(DailySeries(dates, [0.1, 0.1, 0.1]))

    def test_hand_computed_two_point_series(self):
        dates = make_calendar(2).dates
        got = ir_of_series(DailySeries(dates, [0.0, 0.2]))
        assert got == pytest.approx(0.1 / math.sqrt(0.02), abs=1e-12)
        assert got == pytest.approx(0.707107, abs=1e-6)

    def test_scale_invariance(self):
        rng = np.random.default_rng(11)
        dates = make_calendar(40).dates
        vals = rng.normal(0.02, 0.05, size=40)
        a = ir_of_series(DailySeries(dates, vals))
        b = ir_of_series(DailySeries(dates, 2.0 * vals))
        assert a == pytest.approx(b, rel=1e-12)

    def test_too_short(self):
        with pytest.raises(SeriesTooShort):
            ir_of_series(DailySeries(make_calendar(1).dates, [0.1]))


class TestFactorTurnover:
    def test_frozen_ranking_is_zero(self):
        row = np.arange(20.0)
        sig = signal_of(np.tile(row, (5, 1)))
        assert factor_turnover(sig, CFG) == 0.0

    def test_full_replacement_is_two(self):
        # k = 2 of n = 20; days alternate between disjoint leader pairs
        a = np.zeros(20)
        a[:2] = [9.0, 8.0]
        b = np.zeros(20)
        b[10:12] = [9.0, 8.0]
        sig = signal_of(np.array([a, b, a, b]))
        assert factor_turnover(sig, CFG) == 2.0

    def test_half_overlap_is_one(self):
        # k = 2; consecutive top sets share exactly one member
        rows = []
        for start in range(4):
            row = np.zeros(20)
            row[start] = 9.0
            row[start + 1] = 8.0
            rows.append(row)
        sig = signal_of(np.array(rows))
        assert factor_turnover(sig, CFG) == pytest.approx(1.0, abs=1e-15)

    def test_ties_break_by_ascending_identifier(self):
        # k = 2 of n = 20. Day one ties three leaders; ascending-id break
        # keeps S000/S001, so day two's {S001, S002} overlaps in one place.
        day1 = np.zeros(20)
        day1[[0, 1, 2]] = 5.0
        day2 = np.zeros(20)
        day2[[1, 2]] = [9.0, 8.0]
        sig = signal_of(np.array([day1, day2]))
        assert factor_turnover(sig, CFG) == pytest.approx(1.0, abs=1e-15)

    def test_days_below_k_valid_are_skipped(self):
        row = np.arange(20.0)
        hole = np.full(20, np.nan)
        hole[0] = 1.0  # one valid < k = 2
        sig = signal_of(np.array([row, hole, row]))
        assert factor_turnover(sig, CFG) == 0.0

    def test_insufficient_days(self):
        sig = signal_of(np.arange(20.0).reshape(1, 20))
        with pytest.raises(InsufficientDays):
            factor_turnover(sig, CFG)

    def test_bounded_on_random_input(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            vals = rng.normal(size=(30, 15))
            vals[rng.random((30, 15)) < 0.2] = np.nan
            tau = factor_turnover(signal_of(vals), CFG)
            assert 0.0 <= tau <= 2.0


class TestDiversity:
    def test_empty_pool_is_one(self):
        sig, _ = random_case(7)
        assert diversity(sig, [], CFG) == 1.0

    def test_identical_member_is_zero(self):
        sig, _ = random_case(8)
        assert diversity(sig, [sig], CFG) == pytest.approx(0.0, abs=1e-12)

    def test_negated_member_is_zero(self):
        sig, _ = random_case(9)
        neg = signal_of(-sig.values)
        assert diversity(sig, [neg], CFG) == pytest.approx(0.0, abs=1e-12)

    def test_bounded_and_non_increasing_as_pool_grows(self):
        cand, _ = random_case(10)
        rng = np.random.default_rng(10)
        pool = []
        last = 1.0
        for mix in (0.0, 0.3, 0.6, 0.9):
            noise = rng.normal(size=cand.values.shape)
            pool.append(signal_of(mix * np.nan_to_num(cand.values) + noise))
            d = diversity(cand, pool, CFG)
            assert 0.0 <= d <= 1.0
            assert d <= last + 1e-12
            last = d

    def test_shape_mismatch(self):
        cand, _ = random_case(11)
        other = signal_of(np.zeros((5, 4)))
        with pytest.raises(ShapeMismatch):
            diversity(cand, [other], CFG)

    def test_diversity_k_averages_top_members(self):
        cand, _ = random_case(12)
        pool = [cand, signal_of(-cand.values)]
        cfg2 = MetricConfig(diversity_k=2)
        assert diversity(cand, pool, cfg2) == pytest.approx(0.0, abs=1e-12)


class TestReturnMetrics:
    def test_constant_daily_return(self):
        series = DailySeries(make_calendar(5).dates, [0.002] * 5)
        assert annualized_return(series, CFG) == pytest.approx(0.002 * 252, rel=1e-15)

    def test_zero_series(self):
        series = DailySeries(make_calendar(4).dates, [0.0] * 4)
        assert annualized_return(series, CFG) == 0.0

    def test_mean_times_periods(self):
        rng = np.random.default_rng(13)
        vals = rng.normal(0.001, 0.01, size=60)
        series = DailySeries(make_calendar(60).dates, vals)
        expected = (math.fsum(vals) / 60) * 252
        assert annualized_return(series, CFG) == pytest.approx(expected, rel=1e-12)

    def test_empty_series(self):
        series = DailySeries(np.array([], dtype="datetime64[D]"), [])
        with pytest.raises(EmptySeries):
            annualized_return(series, CFG)

    def test_information_ratio_hand_case(self):
        # two points engineered to a 0.001 mean and 0.01 sample std
        half = 0.01 / math.sqrt(2.0)
        vals = np.array([0.001 - half, 0.001 + half])
        series = DailySeries(make_calendar(2).dates, vals)
        mean = math.fsum(vals) / 2
        std = math.sqrt(
            math.fsum((v - mean) ** 2 for v in vals) / 1
        )
        expected = mean * math.sqrt(252) / std
        got = information_ratio(series, CFG)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(1.5875, abs=5e-4)

    def test_information_ratio_scale_invariant(self):
        rng = np.random.default_rng(14)
        vals = rng.normal(0.001, 0.02, size=50)
        series = DailySeries(make_calendar(50).dates, vals)
        scaled = DailySeries(make_calendar(50).dates, 3.0 * vals)
        assert information_ratio(series, CFG) == pytest.approx(
            information_ratio(scaled, CFG), rel=1e-12
        )

    def test_information_ratio_zero_dispersion(self):
        series = DailySeries(make_calendar(3).dates, [0.01] * 3)
        with pytest.raises(ZeroDispersion):
            information_ratio(series, CFG)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_ic_invariant_under_monotone_transforms(seed):
    sig, ret = random_case(seed, T=12, n=8)
    base = daily_rank_ic(sig, ret, CFG)
    warped = daily_rank_ic(signal_of(np.exp(sig.values) + sig.values), ret, CFG)
    assert list(base.dates) == list(warped.dates)
    assert np.allclose(base.values, warped.values, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_turnover_always_within_bounds(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(10, 12))
    vals[rng.random((10, 12)) < 0.3] = np.nan
    try:
        tau = factor_turnover(signal_of(vals), CFG)
    except InsufficientDays:
        return
    assert 0.0 <= tau <= 2.0
