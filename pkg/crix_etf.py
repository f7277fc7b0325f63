"""
CRIX ETF Command Line Interface
コマンドライン - 指数算出・スプレッド推定・バックテスト・レポートの実行

使用例:
    crix-etf build-index --config config.yaml --out ./output
    crix-etf estimate-spreads --config config.yaml
    crix-etf run-backtest --config config.yaml --set costs.enabled=false
    crix-etf report --config config.yaml

終了コード: 0 成功 / 1 引数エラー / 2 データ・計算エラー
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd
import yaml

from crix_lib import ConfigManager, setup_logging
from etf_simulator import BacktestConfig, SimulationError, build_index_path, run_backtests
from index_engine import SelectionError, index_series
from market_data import (
    DataValidationError,
    MarketDataset,
    MissingObservationError,
    load_dataset,
    load_trades,
    rebalance_dates,
    to_date,
)
from report_generator import ReportGenerator
from spread_model import (
    MEAN,
    FitError,
    SpreadScalingError,
    extract_spread_observations,
    fit_diagnostics,
    fit_ols,
    fit_quantile,
    reference_volume,
    scaling_factor_series,
)

logger = logging.getLogger("crix_etf")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

DOMAIN_ERRORS = (
    DataValidationError,
    MissingObservationError,
    SelectionError,
    FitError,
    SpreadScalingError,
    SimulationError,
    FileNotFoundError,
    KeyError,
    ValueError,
    OSError,
)


class UsageError(Exception):
    """コマンドライン引数の誤り"""


class CrixArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = CrixArgumentParser(
        prog="crix-etf", description="CRIX暗号資産指数とETFリバランスのバックテスト"
    )
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    commands = {
        "build-index": "構成銘柄の選択と指数系列の算出",
        "estimate-spreads": "約定データからスプレッド曲線を推定",
        "run-backtest": "ETFリバランスのバックテストを実行",
        "report": "バックテスト結果からグラフ用データとHTMLサマリーを生成",
    }
    for name, help_text in commands.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument("--config", type=str, default="config.yaml", help="設定ファイルのパス")
        sub.add_argument("--out", type=str, help="出力ディレクトリ（既定は output.directory）")
        sub.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="設定値の上書き（例: costs.enabled=false）。複数指定可",
        )
    return parser


def _output_dir(config: ConfigManager, out: Optional[str]) -> Path:
    if out:
        return Path(out)
    resolved = config.resolve_path("output.directory")
    return resolved if resolved is not None else Path("output")


def _load_market(config: ConfigManager) -> MarketDataset:
    return load_dataset(
        config.resolve_path("data.prices"),
        config.resolve_path("data.volumes"),
        config.resolve_path("data.attention"),
        quote_currency=config.get("data.quote_currency", "USDT"),
        staleness_days=int(config.get("data.staleness_days", 3)),
    )


def build_index(config: ConfigManager, output_dir: Path) -> None:
    """リバランス日ごとの指数状態JSONと日次指数系列CSVを出力"""
    dataset = _load_market(config)
    backtest = BacktestConfig.from_config(config)
    dates = rebalance_dates(dataset, backtest.start, backtest.end)
    if not dates:
        raise SimulationError(f"{backtest.start:%Y-%m-%d} - {backtest.end:%Y-%m-%d} にリバランス日がありません")
    path = build_index_path(dataset, backtest, dates)
    calendar = [d for d in dataset.prices.index if dates[0] <= d <= backtest.end]
    levels = index_series(dataset, path.states, calendar)
    ReportGenerator(output_dir, config.config_hash()).write_index_outputs(path, levels)


def estimate_spreads(config: ConfigManager, output_dir: Path) -> None:
    """OLSと設定の分位点でスプレッド曲線を推定し、曲線JSONと診断CSVを出力"""
    trades_path = config.resolve_path("data.trades")
    if trades_path is None:
        raise FileNotFoundError("data.trades が設定されていません")
    observations = extract_spread_observations(
        load_trades(trades_path), config.get("spreads.price_weighting", "equal")
    )
    base_asset = config.get("spreads.base_asset", "BTC")
    observations = [o for o in observations if o.asset == base_asset]

    ols = fit_ols(observations, asset=base_asset)
    quantile = fit_quantile(
        observations,
        tau=float(config.get("spreads.quantile", 0.95)),
        max_iterations=int(config.get("spreads.max_iterations", 200)),
        tolerance=float(config.get("spreads.tolerance", 1e-10)),
        asset=base_asset,
    )

    curves = [quantile, ols]
    reference_date = config.get("spreads.reference_date")
    if reference_date:
        try:
            dataset = _load_market(config)
            volume = reference_volume(
                dataset,
                base_asset,
                reference_date,
                int(config.get("spreads.reference_window_days", 3)),
            )
            curves = [c.with_reference(reference_date, volume) for c in curves]
        except (FileNotFoundError, MissingObservationError) as e:
            logger.warning(f"基準出来高を算出できないため基準日のみ記録します: {e}")
            curves = [replace(c, reference_date=to_date(reference_date)) for c in curves]

    diagnostics = [fit_diagnostics(c, observations) for c in curves]
    for curve, diag in zip(curves, diagnostics):
        kind = "OLS" if curve.quantile == MEAN else f"分位点 {curve.quantile}"
        logger.info(
            f"{kind}: 切片 {curve.intercept:.6e}, 傾き {curve.slope:.6e}, "
            f"観測 {diag.n_observations}件, 直線より上 {diag.share_above:.1%}"
        )
    ReportGenerator(output_dir, config.config_hash()).write_spread_outputs(
        curves, diagnostics, observations
    )


def run_backtest(config: ConfigManager, output_dir: Path) -> None:
    """スケーリング指数ごとのバックテストを実行し全出力と summary.json を書き出す"""
    dataset = _load_market(config)
    backtest = BacktestConfig.from_config(config)
    results = run_backtests(dataset, backtest)
    generator = ReportGenerator(output_dir, config.config_hash())
    generator.write_backtest_outputs(results)
    if backtest.costs_enabled:
        generator.write_scaling_factors(
            _scaling_factors(dataset, backtest, int(config.get("spreads.smoothing_days", 7)))
        )


def _scaling_factors(
    dataset: MarketDataset, backtest: BacktestConfig, smoothing_days: int
) -> pd.DataFrame:
    """基準銘柄のスケーリング係数（aごと、移動平均付き）をバックテスト期間で切り出す"""
    curve = backtest.spread_curve
    assert curve is not None
    if curve.reference_volume_24h is not None:
        reference = curve.reference_volume_24h
    else:
        reference = reference_volume(
            dataset, curve.asset, curve.reference_date, backtest.reference_window_days
        )
    frame = pd.concat(
        [
            scaling_factor_series(dataset, curve.asset, reference, a, smoothing_days)
            for a in backtest.scaling_exponents
        ],
        ignore_index=True,
    )
    frame = frame[(frame["date"] >= backtest.start) & (frame["date"] <= backtest.end)].copy()
    frame["date"] = frame["date"].dt.strftime("%Y-%m-%d")
    return frame


def report(config: ConfigManager, output_dir: Path) -> None:
    """バックテスト出力からグラフ用CSVとHTMLサマリーを生成"""
    ReportGenerator(output_dir, config.config_hash()).generate_report()


COMMANDS: Dict[str, Callable[[ConfigManager, Path], None]] = {
    "build-index": build_index,
    "estimate-spreads": estimate_spreads,
    "run-backtest": run_backtest,
    "report": report,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    crix-etfコマンドのエントリーポイント
    setup.pyのconsole_scriptsから呼び出される
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not Path(args.config).exists():
            raise UsageError(f"設定ファイルが見つかりません: {args.config}")
        config = ConfigManager(args.config)
        config.apply_overrides(args.overrides)
    except (UsageError, ValueError, yaml.YAMLError) as e:
        print(f"エラー: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    setup_logging(config)
    output_dir = _output_dir(config, args.out)
    try:
        COMMANDS[args.subcommand](config, output_dir)
    except DOMAIN_ERRORS as e:
        logger.error(f"{args.subcommand} 失敗: {e}")
        return EXIT_DATA

    logger.info(f"{args.subcommand} 完了: {output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
