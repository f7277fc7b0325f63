"""
Report Generator for CRIX ETF
レポート出力 - バックテスト結果のCSV/JSON書き出し・グラフ用データ・HTMLサマリー

このモジュールは、crix-etfプロジェクトの出力機能を提供します：
- 指数状態JSON・指数系列・構成銘柄数選択の書き出し
- スプレッド曲線と回帰診断の書き出し
- スケーリング指数ごとのバックテスト結果の書き出し
- グラフ描画用の整形済みCSV（描画はしない）
- Jinja2テンプレートによるHTMLサマリー
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader, select_autoescape

from crix_lib import read_json, read_output_csv, write_csv, write_json
from etf_simulator import IndexPath, SimulationResult, performance_summary
from index_engine import SelectionResult
from spread_model import FitDiagnostics, SpreadCurve, SpreadObservation, observations_frame

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"
SUMMARY_TEMPLATE = "summary_report.html"
BACKTEST_FILES = ("reports.csv", "deltas.csv", "series.csv", "weights.csv", "trades.csv")
SCALING_FACTORS_FILE = "scaling_factors.csv"


def exponent_label(a: float) -> str:
    """スケーリング指数ごとの出力ディレクトリ名（a2, a5, a10）"""
    return f"a{a:g}"


class ReportGenerator:
    """出力ディレクトリへの書き出しとレポート生成"""

    def __init__(self, output_dir: Path, config_hash: str):
        """
        Args:
            output_dir (Path): 出力ディレクトリ
            config_hash (str): 全出力ファイルに記録する設定ハッシュ
        """
        self.output_dir = Path(output_dir)
        self.config_hash = config_hash
        self.jinja_env = Environment(
            loader=FileSystemLoader(str(TEMPLATE_DIR)),
            autoescape=select_autoescape(["html", "xml"]),
        )

    # ------------------------------------------------------------------
    # build-index
    # ------------------------------------------------------------------

    def write_index_outputs(self, path: IndexPath, levels: pd.Series) -> List[Path]:
        written = []
        states_dir = self.output_dir / "index_states"
        for state in path.states:
            target = states_dir / f"index_state_{state.as_of:%Y-%m-%d}.json"
            written.append(write_json(state.to_json(), target, self.config_hash))

        frame = levels.rename("index_value").reset_index()
        frame["date"] = frame["date"].dt.strftime("%Y-%m-%d")
        written.append(write_csv(frame, self.output_dir / "index_series.csv", self.config_hash))
        written.append(
            write_csv(
                _selection_frame(path.selections), self.output_dir / "selection.csv", self.config_hash
            )
        )
        logger.info(f"指数出力: 状態 {len(path.states)}件, 系列 {len(frame)}日")
        return written

    # ------------------------------------------------------------------
    # estimate-spreads
    # ------------------------------------------------------------------

    def write_spread_outputs(
        self,
        curves: Sequence[SpreadCurve],
        diagnostics: Sequence[FitDiagnostics],
        observations: Sequence[SpreadObservation],
    ) -> List[Path]:
        written = []
        for curve in curves:
            name = "spread_curve.json" if curve.quantile != "mean" else "spread_curve_ols.json"
            written.append(write_json(curve.to_json(), self.output_dir / name, self.config_hash))
        frame = pd.DataFrame(
            [
                {
                    "model": d.label,
                    "n_observations": d.n_observations,
                    "loss": d.loss,
                    "share_above": d.share_above,
                    "intercept": c.intercept,
                    "slope": c.slope,
                    "notional_min": d.notional_min,
                    "notional_max": d.notional_max,
                }
                for c, d in zip(curves, diagnostics)
            ]
        )
        written.append(write_csv(frame, self.output_dir / "spread_diagnostics.csv", self.config_hash))
        written.append(
            write_csv(
                observations_frame(observations),
                self.output_dir / "spread_observations.csv",
                self.config_hash,
            )
        )
        return written

    # ------------------------------------------------------------------
    # run-backtest
    # ------------------------------------------------------------------

    def write_backtest_outputs(self, results: Mapping[float, SimulationResult]) -> List[Path]:
        """スケーリング指数ごとのサブディレクトリに結果を書き出し、summary.json にまとめる"""
        written = []
        runs: Dict[str, Any] = {}
        first: Optional[SimulationResult] = None
        for a, result in results.items():
            first = first or result
            run_dir = self.output_dir / exponent_label(a)
            frames = {
                "reports.csv": result.reports_frame(),
                "deltas.csv": result.deltas_frame(),
                "series.csv": result.series_frame(),
                "weights.csv": result.weights_frame(),
                "trades.csv": result.trades_frame(),
            }
            for name, frame in frames.items():
                written.append(write_csv(frame, run_dir / name, self.config_hash))
            runs[exponent_label(a)] = performance_summary(result)

        if first is None:
            raise ValueError("バックテスト結果がありません")
        written.append(first.flows.to_csv(self.output_dir / "flows.csv", self.config_hash))
        summary = {
            "runs": runs,
            "rebalance_dates": [d.strftime("%Y-%m-%d") for d in first.index_path.dates],
            "run_labels": list(runs),
        }
        written.append(write_json(summary, self.output_dir / "summary.json", self.config_hash))
        logger.info(f"バックテスト出力: {len(written)}ファイル → {self.output_dir}")
        return written

    def write_scaling_factors(self, frame: pd.DataFrame) -> Path:
        """基準銘柄の日次スケーリング係数（aごと）"""
        return write_csv(frame, self.output_dir / SCALING_FACTORS_FILE, self.config_hash)

    # ------------------------------------------------------------------
    # report
    # ------------------------------------------------------------------

    def _run_dirs(self) -> List[Tuple[str, Path]]:
        summary = self._summary()
        runs = []
        for label in _run_labels(summary):
            run_dir = self.output_dir / label
            for name in BACKTEST_FILES:
                if not (run_dir / name).exists():
                    raise FileNotFoundError(f"バックテスト出力が見つかりません: {run_dir / name}")
            runs.append((label, run_dir))
        return runs

    def _summary(self) -> Dict[str, Any]:
        path = self.output_dir / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"バックテスト出力が見つかりません: {path}（先に run-backtest を実行してください）")
        return read_json(path)

    def generate_plot_data(self) -> Dict[str, Path]:
        """
        グラフ用の整形済みCSVを plots/ に書き出す

        構成銘柄数（月次）、BTC/ETHウェイト、Δ、手数料/スプレッド、スプレッドの箱ひげ統計、
        ETFと指数/ベンチマークの比較系列。
        """
        runs = self._run_dirs()
        plots_dir = self.output_dir / "plots"
        # ウェイトと資金フローはスケーリング指数によらず共通
        _, base_dir = runs[0]
        weights = read_output_csv(base_dir / "weights.csv")
        deltas = read_output_csv(base_dir / "deltas.csv")

        counts = (
            weights.assign(month=weights["date"].str.slice(0, 7))
            .groupby("month", sort=True)["asset"]
            .nunique()
            .rename("n_constituents")
            .reset_index()
        )
        frames: Dict[str, pd.DataFrame] = {
            "constituent_counts.csv": counts,
            "btc_eth_weights.csv": _btc_eth_weights(weights),
            "deltas.csv": deltas[["date", "asset", "delta"]],
        }

        cost_rows, box_rows, index_rows, benchmark_rows = [], [], [], []
        for label, run_dir in runs:
            reports = read_output_csv(run_dir / "reports.csv")
            series = read_output_csv(run_dir / "series.csv")
            cost_rows.append(
                reports[["date", "fees", "spread_costs", "weighted_fee_rate", "weighted_spread"]].assign(run=label)
            )
            box_rows.append(spread_quartiles(label, reports["weighted_spread"].iloc[1:]))
            index_rows.append(
                series[["date", "etf_value", "replication_value", "index_value"]].assign(run=label)
            )
            benchmark_rows.append(series[["date", "etf_value", "benchmark_value"]].assign(run=label))

        frames["costs.csv"] = _run_first(pd.concat(cost_rows, ignore_index=True))
        frames["spread_boxplot.csv"] = pd.DataFrame(box_rows)
        frames["etf_vs_index.csv"] = _run_first(pd.concat(index_rows, ignore_index=True))
        frames["etf_vs_benchmark.csv"] = _run_first(pd.concat(benchmark_rows, ignore_index=True))
        factors_path = self.output_dir / SCALING_FACTORS_FILE
        if factors_path.exists():
            frames["btc_scaling_factor.csv"] = read_output_csv(factors_path)

        written = {
            name: write_csv(frame, plots_dir / name, self.config_hash) for name, frame in frames.items()
        }
        logger.info(f"グラフ用データ: {len(written)}ファイル → {plots_dir}")
        return written

    def generate_html_summary(self) -> Path:
        """summary.json の内容をHTMLの表にまとめる（グラフなし）"""
        summary = self._summary()
        template = self.jinja_env.get_template(SUMMARY_TEMPLATE)
        html_content = template.render(
            config_hash=self.config_hash,
            source_hash=summary.get("config_hash"),
            runs={label: summary["runs"][label] for label in _run_labels(summary)},
            rebalance_dates=summary.get("rebalance_dates", []),
        )
        filepath = self.output_dir / "summary.html"
        with open(filepath, "w", encoding="utf-8", newline="") as f:
            f.write(html_content)
        return filepath

    def generate_report(self) -> List[Path]:
        written = list(self.generate_plot_data().values())
        written.append(self.generate_html_summary())
        return written


def _selection_frame(selections: Sequence[Tuple[pd.Timestamp, SelectionResult]]) -> pd.DataFrame:
    frames = []
    for date, selection in selections:
        frame = selection.to_frame()
        frame.insert(0, "date", date.strftime("%Y-%m-%d"))
        frame["universe_size"] = selection.universe_size
        frames.append(frame)
    columns = ["date", "k", "aic", "residual_norm", "selected", "universe_size"]
    return pd.concat(frames, ignore_index=True)[columns] if frames else pd.DataFrame(columns=columns)


def _btc_eth_weights(weights: pd.DataFrame) -> pd.DataFrame:
    """日付ごとのBTC・ETH・その他のウェイト（構成銘柄でなければ0）"""
    wide = weights.pivot(index="date", columns="asset", values="weight").fillna(0.0)
    result = pd.DataFrame(index=wide.index)
    for asset in ("BTC", "ETH"):
        result[asset.lower()] = wide[asset] if asset in wide.columns else 0.0
    result["other"] = (1.0 - result["btc"] - result["eth"]).clip(lower=0.0)
    return result.reset_index()


def spread_quartiles(label: str, values: pd.Series) -> Dict[str, Any]:
    """Δ加重スプレッドの箱ひげ統計"""
    clean = values.dropna().to_numpy(dtype=float)
    if clean.size == 0:
        return {"run": label, "n": 0, "min": np.nan, "q1": np.nan, "median": np.nan, "q3": np.nan, "max": np.nan}
    q1, median, q3 = np.quantile(clean, [0.25, 0.5, 0.75])
    return {
        "run": label,
        "n": int(clean.size),
        "min": float(clean.min()),
        "q1": float(q1),
        "median": float(median),
        "q3": float(q3),
        "max": float(clean.max()),
    }


def _run_first(frame: pd.DataFrame) -> pd.DataFrame:
    return frame[["run"] + [c for c in frame.columns if c != "run"]]

def _run_labels(summary: Mapping[str, Any]) -> List[str]:
    """書き出し順（スケーリング指数の設定順）のラベル"""
    return list(summary.get("run_labels") or summary["runs"])
