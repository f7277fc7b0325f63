"""
ETF Simulator Test Suite
初期配分・リバランス・バックテスト・パフォーマンス集計のテストコード

pytest実行コマンド:
python -m pytest test_etf_simulator.py -v
"""

import math
import statistics
import time

import numpy as np
import pandas as pd
import pytest

from capital_flows import FlowModelParams
from conftest import make_market, random_market
from cost_model import FeeSchedule, fee_rate
from crix_lib import ConfigManager
from etf_simulator import (
    BacktestConfig,
    SimulationError,
    delta_ranking,
    flow_adjusted_log_returns,
    initialize,
    opposite_sign_count,
    performance_summary,
    rebalance_step,
    run_backtest,
    run_backtests,
    sharpe_ratio,
)
from index_engine import IndexState
from market_data import observation_at
from spread_model import SpreadCurve, VolumeScaledSpreadModel

PRICES = {"A": 10_000.0, "B": 100.0, "C": 50.0}
BTC_REFERENCE_VOLUME = 8.0e9


class ConstantSpread:
    """銘柄・金額によらず一定のスプレッド"""

    def __init__(self, fraction=0.001):
        self.fraction = fraction

    def spread_fraction(self, asset, date, notional):
        return self.fraction


def _state(weights, date="2020-07-01"):
    return IndexState(
        as_of=pd.Timestamp(date),
        constituents=tuple(weights),
        base_quantities={a: max(w, 1e-9) for a, w in weights.items()},
        weights=dict(weights),
        divisor=1.0,
    )


@pytest.fixture
def flat_market():
    n_days = 10
    prices = {a: [p] * n_days for a, p in PRICES.items()}
    caps = {a: [p * 1e6] * n_days for a, p in PRICES.items()}
    return make_market(prices, caps, start="2020-07-01")


def _cost_config(start="2020-04-01", end="2020-09-30", **overrides):
    params = dict(
        start=pd.Timestamp(start),
        end=pd.Timestamp(end),
        spread_curve=SpreadCurve(
            intercept=1.866219e-04,
            slope=5.546762e-09,
            quantile=0.95,
            reference_volume_24h=BTC_REFERENCE_VOLUME,
        ),
        scaling_exponents=(2.0, 5.0, 10.0),
        flow_params=FlowModelParams(seed=7),
    )
    params.update(overrides)
    return BacktestConfig(**params)


def _frictionless_config(start="2020-04-01", end="2020-09-30", **overrides):
    return _cost_config(start, end, costs_enabled=False, flows_enabled=False, spread_curve=None, **overrides)


class TestInitialize:
    """初期配分のテスト"""

    def test_hand_computed_holdings(self, flat_market):
        portfolio = initialize(flat_market, _state({"A": 0.8, "B": 0.2}), 1_000_000.0, "2020-07-01")
        assert portfolio.holdings["A"] == pytest.approx(80.0)
        assert portfolio.holdings["B"] == pytest.approx(2000.0)
        assert portfolio.cash == pytest.approx(0.0, abs=1e-6)

    def test_single_constituent(self, flat_market):
        portfolio = initialize(flat_market, _state({"C": 1.0}), 1_000.0, "2020-07-01")
        assert portfolio.holdings == pytest.approx({"C": 20.0})

    def test_costs_reduce_value(self, flat_market):
        portfolio = initialize(
            flat_market,
            _state({"A": 0.8, "B": 0.2}),
            1_000_000.0,
            "2020-07-01",
            spread_model=ConstantSpread(0.001),
            fee_schedule=FeeSchedule.default(),
        )
        # 手数料 800k×0.2% + 200k×0.2%、スプレッド 0.5×0.1%×1M
        assert portfolio.cumulative_fees == pytest.approx(2_000.0)
        assert portfolio.cumulative_spread_costs == pytest.approx(500.0)
        assert portfolio.value(PRICES) == pytest.approx(997_500.0)
        assert portfolio.holdings["A"] / portfolio.holdings["B"] == pytest.approx(0.04)

    def test_non_positive_capital(self, flat_market):
        with pytest.raises(ValueError):
            initialize(flat_market, _state({"A": 1.0}), 0.0, "2020-07-01")


class TestRebalanceStep:
    """1回のリバランスのテスト"""

    def test_fixed_point(self, flat_market):
        state = _state({"A": 0.8, "B": 0.2})
        schedule = FeeSchedule.default()
        portfolio = initialize(flat_market, state, 1_000_000.0, "2020-07-01", ConstantSpread(), schedule)
        updated, report = rebalance_step(
            portfolio, flat_market, state, state, "2020-07-02", 0.0, ConstantSpread(), schedule
        )
        assert report.trade_costs == ()
        assert report.fees == 0.0 and report.spread_costs == 0.0
        assert updated.holdings == pytest.approx(portfolio.holdings, rel=1e-12)
        assert report.turnover_one_sided == 0.0
        assert math.isnan(report.weighted_fee_rate)
        assert not report.reconstituted

    def test_full_to_half(self, flat_market):
        portfolio = initialize(flat_market, _state({"A": 1.0}), 100.0, "2020-07-01")
        updated, report = rebalance_step(
            portfolio,
            flat_market,
            _state({"A": 1.0}),
            _state({"A": 0.5, "B": 0.5}, "2020-07-02"),
            "2020-07-02",
            0.0,
        )
        assert report.trades["A"] == pytest.approx(-50.0)
        assert report.trades["B"] == pytest.approx(50.0)
        assert report.deltas == pytest.approx({"A": -0.5, "B": 0.5})
        assert report.delta_sum == pytest.approx(0.0, abs=1e-12)
        assert report.turnover_one_sided == pytest.approx(0.5)
        assert report.turnover_two_sided == pytest.approx(1.0)
        assert updated.holdings == pytest.approx({"A": 0.005, "B": 0.5})
        assert report.reconstituted

    def test_dropped_constituent_is_sold(self, flat_market):
        old = _state({"A": 0.6, "B": 0.4})
        portfolio = initialize(flat_market, old, 1_000_000.0, "2020-07-01")
        updated, report = rebalance_step(
            portfolio, flat_market, old, _state({"A": 0.7, "C": 0.3}, "2020-07-03"), "2020-07-03", 0.0
        )
        assert "B" not in updated.holdings
        assert report.trades["B"] == pytest.approx(-400_000.0)
        assert report.deltas["B"] == pytest.approx(-0.4)
        assert report.deltas["C"] == pytest.approx(0.3)
        assert updated.holdings["C"] == pytest.approx(6_000.0)

    def test_weighted_rates(self, flat_market):
        schedule = FeeSchedule.default()
        portfolio = initialize(flat_market, _state({"A": 1.0}), 100.0, "2020-07-01")
        _, report = rebalance_step(
            portfolio,
            flat_market,
            _state({"A": 1.0}),
            _state({"A": 0.5, "B": 0.5}),
            "2020-07-02",
            0.0,
            ConstantSpread(0.002),
            schedule,
        )
        assert report.weighted_fee_rate == pytest.approx(0.005)
        assert report.weighted_spread == pytest.approx(0.002)
        assert [t.asset for t in report.trade_costs] == ["A", "B"]

    def test_value_accounting_with_flow(self, flat_market):
        schedule = FeeSchedule.default()
        old = _state({"A": 0.8, "B": 0.2})
        portfolio = initialize(flat_market, old, 1_000_000.0, "2020-07-01", ConstantSpread(), schedule)
        updated, report = rebalance_step(
            portfolio,
            flat_market,
            old,
            _state({"A": 0.5, "B": 0.3, "C": 0.2}),
            "2020-07-04",
            50_000.0,
            ConstantSpread(),
            schedule,
        )
        expected = report.pre_value + 50_000.0 - report.fees - report.spread_costs
        assert report.post_value == pytest.approx(expected, rel=1e-9)
        assert updated.value(PRICES) == pytest.approx(report.post_value, rel=1e-12)
        assert report.deposit == 50_000.0
        assert updated.cumulative_fees >= portfolio.cumulative_fees
        assert updated.cash >= 0.0
        assert all(units >= 0 for units in updated.holdings.values())

    def test_withdrawal_is_clamped(self, flat_market):
        schedule = FeeSchedule.default()
        state = _state({"A": 0.8, "B": 0.2})
        portfolio = initialize(flat_market, state, 1_000_000.0, "2020-07-01")
        updated, report = rebalance_step(
            portfolio, flat_market, state, state, "2020-07-02", -2_000_000.0, ConstantSpread(), schedule
        )
        assert report.withdrawal_clamped
        assert report.requested_flow == -2_000_000.0
        assert report.deposit == pytest.approx(-(1_000_000.0 - report.fees - report.spread_costs))
        assert report.fees == pytest.approx(2_000.0)
        assert updated.holdings == {}
        assert report.post_value == pytest.approx(0.0, abs=1e-6)

    def test_withdrawal_above_liquidation_value_is_clamped(self, flat_market):
        """時価以下でも売却コスト控除後の清算価値を超える出金は全額清算"""
        state = _state({"A": 0.8, "B": 0.2})
        portfolio = initialize(flat_market, state, 1_000_000.0, "2020-07-01")
        updated, report = rebalance_step(
            portfolio, flat_market, state, state, "2020-07-02", -998_000.0, ConstantSpread(), FeeSchedule.default()
        )
        assert report.withdrawal_clamped
        assert report.fees == pytest.approx(2_000.0)
        assert report.spread_costs == pytest.approx(500.0)
        assert report.deposit == pytest.approx(-997_500.0)
        assert updated.holdings == {}
        assert report.post_value == pytest.approx(0.0, abs=1e-6)

    def test_withdrawal_below_liquidation_value_is_paid(self, flat_market):
        state = _state({"A": 0.8, "B": 0.2})
        portfolio = initialize(flat_market, state, 1_000_000.0, "2020-07-01")
        updated, report = rebalance_step(
            portfolio, flat_market, state, state, "2020-07-02", -990_000.0, ConstantSpread(), FeeSchedule.default()
        )
        assert not report.withdrawal_clamped
        assert report.deposit == -990_000.0
        assert report.fees == pytest.approx(1_980.0)
        assert report.post_value == pytest.approx(10_000.0 - 1_980.0 - 495.0)
        assert updated.holdings["A"] * PRICES["A"] == pytest.approx(0.8 * report.post_value)

    def test_missing_price_reports_date_and_asset(self):
        n_days = 10
        nan = np.nan
        prices = {"A": [10.0] * n_days, "B": [5.0, 5.0, 5.0] + [nan] * (n_days - 3)}
        caps = {a: [1e6 if not np.isnan(p) else nan for p in v] for a, v in prices.items()}
        market = make_market(prices, caps, start="2020-07-01")
        old = _state({"A": 0.5, "B": 0.5})
        portfolio = initialize(market, old, 1_000.0, "2020-07-01")
        with pytest.raises(SimulationError) as excinfo:
            rebalance_step(portfolio, market, old, _state({"A": 1.0}), "2020-07-09", 0.0)
        assert excinfo.value.asset == "B"
        assert excinfo.value.date == pd.Timestamp("2020-07-09")
        assert str(excinfo.value).startswith("2020-07-09 B:")


def _assert_delta_conservation(result):
    assert result.reports[0].delta_sum == pytest.approx(1.0, abs=1e-12)
    for report in result.reports[1:]:
        assert report.delta_sum == pytest.approx(0.0, abs=1e-12)
        sold = -sum(d for d in report.deltas.values() if d < 0)
        bought = sum(d for d in report.deltas.values() if d > 0)
        assert sold == pytest.approx(report.turnover_one_sided, abs=1e-12)
        assert bought == pytest.approx(report.turnover_one_sided, abs=1e-12)


def _replay(dataset, result, spread_model, schedule, spread_share):
    """銘柄ごとの素朴な会計でリバランス結果を再計算"""
    holdings = {}
    rows = []
    for i, (date, state) in enumerate(zip(result.index_path.dates, result.index_path.states)):
        flow = result.flows.entries[i][1]
        assets = sorted(set(holdings) | set(state.constituents))
        prices = {a: observation_at(dataset, a, date).price for a in assets}
        current = {a: holdings.get(a, 0.0) * prices[a] for a in assets}
        pre = sum(current.values())
        investable = pre + flow
        fees = spreads = 0.0
        for a in assets:
            notional = abs(state.weights.get(a, 0.0) * investable - current[a])
            if notional <= 1e-12 * max(investable, pre):
                continue
            fees += fee_rate(schedule, notional) * notional
            spreads += spread_share * spread_model.spread_fraction(a, date, notional) * notional
        net = investable - fees - spreads
        holdings = {a: w * net / prices[a] for a, w in state.weights.items() if w > 0}
        rows.append({"pre": pre, "fees": fees, "spreads": spreads, "post": net, "holdings": holdings})
    return rows


class TestRunBacktest:
    """バックテストのテスト"""

    def test_frictionless_replication_is_proportional(self, three_asset_market):
        result = run_backtest(three_asset_market, _frictionless_config())
        ratio = result.series["etf_value"] / result.series["index_value"]
        assert (ratio / ratio.iloc[0] - 1.0).abs().max() <= 1e-9
        summary = performance_summary(result)
        assert summary["frictionless_proportional"]
        assert summary["costs"]["total_fees"] == 0.0
        assert summary["values"]["total_deposits"] == pytest.approx(1_000_000.0)
        assert summary["sharpe"]["etf"] == pytest.approx(summary["sharpe"]["index"], rel=1e-6)

    def test_rebalance_schedule(self, three_asset_market):
        result = run_backtest(three_asset_market, _cost_config())
        dates = [r.date.strftime("%Y-%m-%d") for r in result.reports]
        assert dates == ["2020-04-01", "2020-05-01", "2020-06-01", "2020-07-01", "2020-08-01", "2020-09-01"]
        assert [r.date for r in result.reports] == list(result.index_path.dates)
        assert result.index_path.reconstituted == (True, False, False, True, False, False)
        assert result.series.index[0] == pd.Timestamp("2020-04-01")
        assert result.series.index[-1] == pd.Timestamp("2020-09-30")
        assert result.scaling_exponent == 2.0

    def test_delta_conservation(self, three_asset_market):
        result = run_backtest(three_asset_market, _cost_config())
        _assert_delta_conservation(result)

    def test_delta_conservation_random_markets(self, rng):
        """ランダム市場100通りでΔの合計は初回1、以降0"""
        for _ in range(100):
            market = random_market(rng, n_assets=int(rng.integers(2, 7)), n_days=213)
            result = run_backtest(market, _frictionless_config(end="2020-07-31", benchmark_asset="C00"))
            assert len(result.reports) == 4
            _assert_delta_conservation(result)

    def test_frictionless_runtime(self, rng):
        """10銘柄・12か月の摩擦なしバックテストは1秒未満"""
        market = random_market(rng, n_assets=10, n_days=460)
        config = _frictionless_config(end="2021-03-31", benchmark_asset="C00")
        started = time.perf_counter()
        result = run_backtest(market, config)
        elapsed = time.perf_counter() - started
        assert len(result.reports) == 12
        assert performance_summary(result)["frictionless_proportional"]
        assert elapsed < 1.0

    def test_accounting_matches_replay(self, three_asset_market):
        """3回のリバランスを銘柄ごとの会計で再計算して照合"""
        config = _cost_config(end="2020-06-30")
        result = run_backtest(three_asset_market, config, scaling_exponent=5.0)
        assert len(result.reports) == 3
        spread_model = VolumeScaledSpreadModel(config.spread_curve, three_asset_market, 5.0)
        expected = _replay(three_asset_market, result, spread_model, config.fee_schedule, config.spread_share)
        for report, row in zip(result.reports, expected):
            assert report.pre_value == pytest.approx(row["pre"], rel=1e-9)
            assert report.fees == pytest.approx(row["fees"], rel=1e-9)
            assert report.spread_costs == pytest.approx(row["spreads"], rel=1e-9)
            assert report.post_value == pytest.approx(row["post"], rel=1e-9)
            assert report.post_value == pytest.approx(
                report.pre_value + report.deposit - report.fees - report.spread_costs, rel=1e-9
            )
        last_day = result.series.index[-1]
        final_prices = {a: observation_at(three_asset_market, a, last_day).price for a in expected[-1]["holdings"]}
        replayed_value = sum(units * final_prices[a] for a, units in expected[-1]["holdings"].items())
        assert result.series["etf_value"].iloc[-1] == pytest.approx(replayed_value, rel=1e-9)

    def test_cost_gap_grows(self, rng):
        """ランダム市場でもETFは摩擦なし複製を下回り、差は単調増加"""
        for _ in range(50):
            market = random_market(rng, n_assets=5, n_days=240)
            config = _cost_config(
                end="2020-08-27",
                benchmark_asset="C00",
                spread_curve=SpreadCurve(1.866219e-04, 5.546762e-09, 0.95, reference_volume_24h=1e9),
            )
            result = run_backtest(market, config)
            series = result.series
            assert (series["etf_value"] <= series["replication_value"] * (1 + 1e-12)).all()
            gap = series["cost_gap_units"].to_numpy()
            assert gap[0] > 0
            assert np.all(np.diff(gap) >= -1e-9 * gap.max())
            assert performance_summary(result)["cost_gap_non_decreasing"]

    def test_flows_reach_portfolio(self, three_asset_market):
        result = run_backtest(three_asset_market, _cost_config())
        deposits = [r.deposit for r in result.reports]
        assert deposits[0] == 1_000_000.0
        assert deposits[1:] == [f for _, f in result.flows.entries[1:]]
        assert result.series["deposit"].sum() == pytest.approx(sum(deposits))

    def test_benchmark_tracks_price_plus_flows(self, three_asset_market):
        result = run_backtest(three_asset_market, _cost_config(end="2020-05-31"))
        series = result.series
        first, second = result.reports[0], result.reports[1]
        btc = three_asset_market.filled_prices["BTC"]
        units = first.deposit / btc.loc[first.date]
        assert series.loc[pd.Timestamp("2020-04-20"), "benchmark_value"] == pytest.approx(
            units * btc.loc[pd.Timestamp("2020-04-20")]
        )
        units += second.deposit / btc.loc[second.date]
        assert series.index[-1] == pd.Timestamp("2020-05-31")
        assert series["benchmark_value"].iloc[-1] == pytest.approx(units * btc.loc[pd.Timestamp("2020-05-31")])

    def test_run_per_exponent(self, three_asset_market):
        results = run_backtests(three_asset_market, _cost_config())
        assert list(results) == [2.0, 5.0, 10.0]
        assert results[2.0].index_path is results[10.0].index_path
        assert results[2.0].flows is results[5.0].flows
        assert [r.scaling_exponent for r in results.values()] == [2.0, 5.0, 10.0]

    def test_exponent_irrelevant_without_costs(self, three_asset_market):
        results = run_backtests(three_asset_market, _frictionless_config())
        values = [r.series["etf_value"].to_numpy() for r in results.values()]
        assert all(np.array_equal(values[0], v) for v in values[1:])

    def test_deterministic(self, three_asset_market):
        first = run_backtest(three_asset_market, _cost_config())
        second = run_backtest(three_asset_market, _cost_config())
        pd.testing.assert_frame_equal(first.series, second.series)
        assert first.reports == second.reports

    def test_no_rebalance_dates(self, three_asset_market):
        with pytest.raises(SimulationError):
            run_backtest(three_asset_market, _cost_config(start="2021-01-01", end="2021-03-01"))

    def test_insufficient_history(self, three_asset_market):
        with pytest.raises(SimulationError):
            run_backtest(three_asset_market, _cost_config(start="2020-01-01"))

    def test_frames(self, three_asset_market):
        result = run_backtest(three_asset_market, _cost_config(end="2020-06-30"))
        reports = result.reports_frame()
        assert len(reports) == 3
        assert {"date", "pre_value", "post_value", "deposit", "fees", "spread_costs", "turnover_one_sided", "n_constituents"} <= set(reports.columns)
        deltas = result.deltas_frame()
        assert list(deltas.columns) == ["date", "asset", "delta", "trade_notional"]
        assert deltas.groupby("date")["delta"].sum().iloc[1:].abs().max() <= 1e-12
        assert list(result.series_frame().columns[:4]) == ["date", "etf_value", "index_value", "replication_value"]
        assert len(result.trades_frame()) == sum(len(r.trade_costs) for r in result.reports)
        weights = result.weights_frame()
        assert weights.groupby("date")["weight"].sum().to_numpy() == pytest.approx([1.0] * 3)


class TestBacktestConfig:
    def test_costs_require_curve(self):
        with pytest.raises(ValueError):
            BacktestConfig(start=pd.Timestamp("2020-07-01"), end=pd.Timestamp("2021-06-01"))

    def test_end_before_start(self):
        with pytest.raises(ValueError):
            _frictionless_config(start="2020-07-01", end="2020-06-01")

    def test_from_default_config(self):
        config = BacktestConfig.from_config(ConfigManager(None))
        assert config.start == pd.Timestamp("2020-07-01")
        assert config.scaling_exponents == (2.0, 5.0, 10.0)
        assert config.spread_curve.intercept == 1.866219e-04
        assert config.spread_curve.reference_date == pd.Timestamp("2021-06-01")
        assert config.initial_capital == 1_000_000.0
        assert config.candidate_ks is None


class TestPerformance:
    """シャープレシオ・集計のテスト"""

    def test_sharpe_hand_computation(self):
        returns = [0.01, -0.02, 0.03, 0.005]
        expected = statistics.mean(returns) / statistics.stdev(returns) * math.sqrt(365)
        assert sharpe_ratio(returns) == pytest.approx(expected, rel=1e-9)

    def test_constant_returns_are_undefined(self):
        assert sharpe_ratio([0.01] * 30) is None
        assert sharpe_ratio([0.0] * 5) is None

    def test_too_few_returns(self):
        with pytest.raises(ValueError):
            sharpe_ratio([0.01])

    def test_flow_adjusted_returns(self):
        index = pd.date_range("2020-07-01", periods=3, freq="D")
        values = pd.Series([100.0, 150.0, 160.0], index=index)
        deposits = pd.Series([100.0, 50.0, 0.0], index=index)
        returns = flow_adjusted_log_returns(values, deposits)
        assert returns.to_numpy() == pytest.approx([0.0, math.log(160.0 / 150.0)])

    def test_summary_contents(self, three_asset_market):
        result = run_backtest(three_asset_market, _cost_config())
        summary = performance_summary(result, "BTC")
        series = result.series
        etf_returns = np.log((series["etf_value"] - series["deposit"]) / series["etf_value"].shift(1)).iloc[1:]
        assert summary["sharpe"]["etf"] == pytest.approx(
            etf_returns.mean() / etf_returns.std(ddof=1) * math.sqrt(365), rel=1e-9
        )
        btc = three_asset_market.filled_prices["BTC"].loc[series.index]
        btc_returns = np.log(btc / btc.shift(1)).iloc[1:]
        assert summary["sharpe"]["benchmark"] == pytest.approx(
            btc_returns.mean() / btc_returns.std(ddof=1) * math.sqrt(365), rel=1e-6
        )
        turnovers = [r.turnover_one_sided for r in result.reports[1:]]
        assert summary["turnover_one_sided"]["mean"] == pytest.approx(np.mean(turnovers))
        assert summary["turnover_one_sided"]["max"] == pytest.approx(max(turnovers))
        assert summary["costs"]["total_fees"] > 0
        assert summary["n_rebalances"] == 6
        assert summary["values"]["etf_final"] < summary["values"]["replication_final"]
        assert not summary["frictionless_proportional"]

    def test_unknown_benchmark(self, three_asset_market):
        result = run_backtest(three_asset_market, _frictionless_config())
        with pytest.raises(ValueError):
            performance_summary(result, "DOGE")

    def test_delta_ranking_and_opposite_signs(self, three_asset_market):
        result = run_backtest(three_asset_market, _frictionless_config())
        totals = {}
        opposite = 0
        for report in result.reports[1:]:
            for asset, delta in report.deltas.items():
                totals[asset] = totals.get(asset, 0.0) + abs(delta)
            if report.deltas.get("BTC", 0.0) * report.deltas.get("ETH", 0.0) < 0:
                opposite += 1
        ranking = delta_ranking(result)
        assert [a for a, _ in ranking] == sorted(totals, key=lambda a: (-totals[a], a))
        assert dict(ranking) == pytest.approx(totals)
        assert opposite_sign_count(result) == opposite
