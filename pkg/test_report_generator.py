"""
Report Generator Test Suite
出力ファイル・グラフ用データ・HTMLサマリーのテストコード

pytest実行コマンド:
python -m pytest test_report_generator.py -v
"""

import json

import numpy as np
import pandas as pd
import pytest

from crix_lib import CONFIG_HASH_PREFIX, read_json, read_output_csv, write_json
from etf_simulator import BacktestConfig, build_index_path, run_backtests
from index_engine import index_series
from market_data import rebalance_dates
from report_generator import ReportGenerator, _btc_eth_weights, exponent_label, spread_quartiles
from spread_model import SpreadCurve, SpreadObservation, fit_diagnostics, fit_ols, fit_quantile

CONFIG_HASH = "0123456789abcdef"


def _config(**overrides):
    params = dict(
        start=pd.Timestamp("2020-04-01"),
        end=pd.Timestamp("2020-09-30"),
        spread_curve=SpreadCurve(1.866219e-04, 5.546762e-09, 0.95, reference_volume_24h=8.0e9),
    )
    params.update(overrides)
    return BacktestConfig(**params)


@pytest.fixture
def generator(tmp_path):
    return ReportGenerator(tmp_path / "output", CONFIG_HASH)


@pytest.fixture
def backtest_output(generator, three_asset_market):
    """3つのスケーリング指数でのバックテスト結果を書き出したジェネレータ"""
    generator.write_backtest_outputs(run_backtests(three_asset_market, _config()))
    return generator


def test_exponent_label():
    assert exponent_label(2.0) == "a2"
    assert exponent_label(10) == "a10"
    assert exponent_label(2.5) == "a2.5"


class TestIndexOutputs:
    """build-index 出力のテスト"""

    def test_states_series_and_selection(self, generator, three_asset_market):
        config = _config()
        dates = rebalance_dates(three_asset_market, config.start, config.end)
        path = build_index_path(three_asset_market, config, dates)
        calendar = [d for d in three_asset_market.prices.index if dates[0] <= d <= config.end]
        levels = index_series(three_asset_market, path.states, calendar)

        written = generator.write_index_outputs(path, levels)
        assert len(written) == len(dates) + 2

        state = read_json(generator.output_dir / "index_states" / "index_state_2020-04-01.json")
        assert state["config_hash"] == CONFIG_HASH
        assert sum(c["weight"] for c in state["constituents"]) == pytest.approx(1.0)

        series = read_output_csv(generator.output_dir / "index_series.csv")
        assert list(series.columns) == ["date", "index_value"]
        assert series["date"].iloc[0] == "2020-04-01"
        assert series["index_value"].iloc[0] == pytest.approx(1000.0)

        selection = read_output_csv(generator.output_dir / "selection.csv")
        assert selection.groupby("date")["selected"].sum().tolist() == [1, 1]
        assert (selection["universe_size"] == 3).all()


class TestSpreadOutputs:
    def test_curves_and_diagnostics(self, generator):
        rng = np.random.default_rng(5)
        notionals = rng.uniform(100.0, 50_000.0, 200)
        observations = [
            SpreadObservation(notional=float(x), spread_fraction=float(1e-4 + 5e-9 * x + rng.uniform(0, 1e-4)), asset="BTC")
            for x in notionals
        ]
        curves = [fit_quantile(observations, 0.95), fit_ols(observations)]
        diagnostics = [fit_diagnostics(c, observations) for c in curves]
        generator.write_spread_outputs(curves, diagnostics, observations)

        quantile = read_json(generator.output_dir / "spread_curve.json")
        assert quantile["quantile"] == 0.95
        assert quantile["config_hash"] == CONFIG_HASH
        assert read_json(generator.output_dir / "spread_curve_ols.json")["quantile"] == "mean"

        frame = read_output_csv(generator.output_dir / "spread_diagnostics.csv")
        assert frame["model"].tolist() == ["q95", "mean"]
        assert frame["n_observations"].tolist() == [200, 200]
        assert len(read_output_csv(generator.output_dir / "spread_observations.csv")) == 200


class TestBacktestOutputs:
    """run-backtest 出力のテスト"""

    def test_files_per_exponent(self, backtest_output):
        output_dir = backtest_output.output_dir
        for label in ("a2", "a5", "a10"):
            for name in ("reports.csv", "deltas.csv", "series.csv", "weights.csv", "trades.csv"):
                path = output_dir / label / name
                assert path.read_text(encoding="utf-8").startswith(f"{CONFIG_HASH_PREFIX}{CONFIG_HASH}\n")
        assert (output_dir / "flows.csv").exists()

    def test_summary_json(self, backtest_output):
        text = (backtest_output.output_dir / "summary.json").read_text(encoding="utf-8")
        summary = json.loads(text)
        assert summary["config_hash"] == CONFIG_HASH
        assert list(summary["runs"]) == ["a10", "a2", "a5"]  # sort_keys
        assert summary["run_labels"] == ["a2", "a5", "a10"]
        assert summary["rebalance_dates"][0] == "2020-04-01"
        assert summary["runs"]["a5"]["scaling_exponent"] == 5.0
        assert summary["runs"]["a2"]["n_rebalances"] == 6

    def test_empty_results(self, generator):
        with pytest.raises(ValueError):
            generator.write_backtest_outputs({})


class TestPlotData:
    """グラフ用データのテスト"""

    def test_plot_files(self, backtest_output):
        written = backtest_output.generate_plot_data()
        assert set(written) == {
            "constituent_counts.csv",
            "btc_eth_weights.csv",
            "deltas.csv",
            "costs.csv",
            "spread_boxplot.csv",
            "etf_vs_index.csv",
            "etf_vs_benchmark.csv",
        }
        assert all(p.parent == backtest_output.output_dir / "plots" for p in written.values())

    def test_plot_contents(self, backtest_output):
        written = backtest_output.generate_plot_data()
        counts = read_output_csv(written["constituent_counts.csv"])
        assert counts["month"].tolist() == ["2020-04", "2020-05", "2020-06", "2020-07", "2020-08", "2020-09"]

        weights = read_output_csv(written["btc_eth_weights.csv"])
        totals = weights["btc"] + weights["eth"] + weights["other"]
        assert totals.to_numpy() == pytest.approx(np.ones(len(weights)))
        assert (weights["btc"] > weights["eth"]).all()

        boxplot = read_output_csv(written["spread_boxplot.csv"])
        assert boxplot["run"].tolist() == ["a2", "a5", "a10"]
        assert (boxplot["q1"] <= boxplot["median"]).all() and (boxplot["median"] <= boxplot["q3"]).all()

        comparison = read_output_csv(written["etf_vs_index.csv"])
        assert comparison.columns[0] == "run"
        assert set(comparison["run"]) == {"a2", "a5", "a10"}

    def test_cost_decomposition_matches_trades(self, backtest_output):
        """日付ごとの手数料・スプレッドは約定明細の合計と一致"""
        written = backtest_output.generate_plot_data()
        costs = read_output_csv(written["costs.csv"])
        trades = read_output_csv(backtest_output.output_dir / "a5" / "trades.csv")
        expected = trades.groupby("date")[["fee", "spread_cost"]].sum()
        run = costs[costs["run"] == "a5"].set_index("date")
        assert run["fees"].to_numpy() == pytest.approx(expected.loc[run.index, "fee"].to_numpy(), rel=1e-12)
        assert run["spread_costs"].to_numpy() == pytest.approx(
            expected.loc[run.index, "spread_cost"].to_numpy(), rel=1e-12
        )

    def test_cost_plot_has_weighted_rates(self, backtest_output):
        """Δ加重の平均手数料率・スプレッドは reports.csv と同じ値"""
        written = backtest_output.generate_plot_data()
        costs = read_output_csv(written["costs.csv"])
        assert list(costs.columns) == [
            "run", "date", "fees", "spread_costs", "weighted_fee_rate", "weighted_spread"
        ]
        reports = read_output_csv(backtest_output.output_dir / "a10" / "reports.csv")
        run = costs[costs["run"] == "a10"].reset_index(drop=True)
        for column in ("weighted_fee_rate", "weighted_spread"):
            expected = reports[column].iloc[1:].to_numpy()
            assert run[column].iloc[1:].to_numpy() == pytest.approx(expected, rel=1e-12, nan_ok=True)

    def test_boxplot_matches_direct_quantiles(self, backtest_output):
        written = backtest_output.generate_plot_data()
        boxplot = read_output_csv(written["spread_boxplot.csv"]).set_index("run")
        for label in ("a2", "a5", "a10"):
            spreads = read_output_csv(backtest_output.output_dir / label / "reports.csv")["weighted_spread"]
            values = np.sort(spreads.iloc[1:].dropna().to_numpy())
            assert boxplot.at[label, "n"] == len(values)
            assert boxplot.at[label, "median"] == pytest.approx(np.median(values))
            assert boxplot.at[label, "min"] == pytest.approx(values[0])
            assert boxplot.at[label, "max"] == pytest.approx(values[-1])

    def test_scaling_factor_plot(self, backtest_output):
        frame = pd.DataFrame(
            {"date": ["2020-07-01", "2020-07-02"], "asset": "BTC", "a": 5.0, "factor": [1.3, 1.2], "smoothed": [1.3, 1.25]}
        )
        backtest_output.write_scaling_factors(frame)
        written = backtest_output.generate_plot_data()
        factors = read_output_csv(written["btc_scaling_factor.csv"])
        assert factors["smoothed"].tolist() == [1.3, 1.25]

    def test_requires_backtest(self, generator):
        with pytest.raises(FileNotFoundError):
            generator.generate_plot_data()

    def test_missing_run_file(self, backtest_output):
        (backtest_output.output_dir / "a5" / "trades.csv").unlink()
        with pytest.raises(FileNotFoundError):
            backtest_output.generate_report()


class TestHtmlSummary:
    def test_render(self, backtest_output):
        path = backtest_output.generate_html_summary()
        html = path.read_text(encoding="utf-8")
        assert "CRIX ETF バックテスト サマリー" in html
        assert CONFIG_HASH in html
        for label in ("a2", "a5", "a10"):
            assert label in html
        assert "2020-09-01" in html

    def test_undefined_sharpe(self, backtest_output):
        """シャープレシオが定義できない場合は数値ではなく表示で区別"""
        summary_path = backtest_output.output_dir / "summary.json"
        summary = read_json(summary_path)
        summary["runs"]["a2"]["sharpe"]["etf"] = None
        write_json({k: v for k, v in summary.items() if k != "config_hash"}, summary_path, "feedfacecafebeef")
        html = backtest_output.generate_html_summary().read_text(encoding="utf-8")
        assert "定義不能" in html
        assert "feedfacecafebeef" in html

    def test_generate_report(self, backtest_output):
        written = backtest_output.generate_report()
        assert written[-1].name == "summary.html"
        assert len(written) == 8


class TestSpreadQuartiles:
    def test_quartiles(self):
        stats = spread_quartiles("a5", pd.Series([5.0, 1.0, np.nan, 3.0, 2.0, 4.0]))
        assert stats == {"run": "a5", "n": 5, "min": 1.0, "q1": 2.0, "median": 3.0, "q3": 4.0, "max": 5.0}

    def test_empty(self):
        stats = spread_quartiles("a2", pd.Series([np.nan]))
        assert stats["n"] == 0
        assert np.isnan(stats["median"])


def test_btc_eth_weights_without_btc():
    """BTC・ETHが構成銘柄にない日は0として扱う"""
    weights = pd.DataFrame({"date": ["2020-07-01", "2020-08-03"], "asset": ["XRP", "XRP"], "weight": [1.0, 1.0]})
    frame = _btc_eth_weights(weights)
    assert frame["btc"].tolist() == [0.0, 0.0]
    assert frame["eth"].tolist() == [0.0, 0.0]
    assert frame["other"].tolist() == [1.0, 1.0]
