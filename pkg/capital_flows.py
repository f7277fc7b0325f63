"""
Capital Flows Module for CRIX ETF
資金流出入 - 注目度指数に非対称に連動する累積ランダムウォーク

このモジュールは、crix-etfプロジェクトの資金フロー生成機能を提供します：
- 月次平均の注目度変化に対する上昇・下降で異なる感応度
- シード固定の正規ノイズ（同一シードなら同一スケジュール）
- リバランス日にのみ発生する入出金
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dateutil.relativedelta import relativedelta

from crix_lib import write_csv
from market_data import AttentionSeries, DateLike, to_date

logger = logging.getLogger(__name__)

ATTENTION_COVERAGE_SLACK_DAYS = 7


@dataclass(frozen=True)
class FlowModelParams:
    """資金フローモデルのパラメータ"""

    initial_capital: float = 1_000_000.0
    beta_up: float = 0.5
    beta_down: float = 0.1
    noise_scale: float = 10_000.0
    seed: int = 42

    def __post_init__(self) -> None:
        if not self.initial_capital > 0:
            raise ValueError(f"初期資本は正の値である必要があります: {self.initial_capital}")
        if self.beta_up < 0 or self.beta_down < 0:
            raise ValueError("beta_up / beta_down は0以上である必要があります")
        if self.beta_down > self.beta_up:
            raise ValueError(
                f"beta_down ({self.beta_down}) は beta_up ({self.beta_up}) 以下である必要があります"
            )
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale は0以上である必要があります: {self.noise_scale}")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> "FlowModelParams":
        defaults = cls()
        return cls(
            initial_capital=float(section.get("initial_capital", defaults.initial_capital)),
            beta_up=float(section.get("beta_up", defaults.beta_up)),
            beta_down=float(section.get("beta_down", defaults.beta_down)),
            noise_scale=float(section.get("noise_scale", defaults.noise_scale)),
            seed=int(section.get("seed", defaults.seed)),
        )


@dataclass(frozen=True)
class FlowSchedule:
    """
    リバランス日ごとの純入出金

    entries の先頭は (t0, 初期資本)、以降は (リバランス日, 純フロー)。
    """

    entries: Tuple[Tuple[pd.Timestamp, float], ...]
    initial_capital: float
    attention_changes: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("フロースケジュールが空です")
        if self.entries[0][1] != self.initial_capital:
            raise ValueError("先頭のエントリは初期資本である必要があります")
        dates = [d for d, _ in self.entries]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError("フローの日付は狭義単調増加である必要があります")

    @property
    def start_date(self) -> pd.Timestamp:
        return self.entries[0][0]

    @property
    def dates(self) -> List[pd.Timestamp]:
        return [d for d, _ in self.entries]

    def flow_at(self, date: DateLike) -> float:
        """t0 より後の日付の純フロー（スケジュールにない日付は0）"""
        date = to_date(date)
        for entry_date, flow in self.entries[1:]:
            if entry_date == date:
                return flow
        return 0.0

    def cumulative_capital(self) -> pd.Series:
        """初期資本に純フローを累積した系列（累積ランダムウォーク）"""
        flows = [self.initial_capital] + [f for _, f in self.entries[1:]]
        values = np.cumsum(flows)
        return pd.Series(values, index=pd.DatetimeIndex(self.dates, name="date"), name="capital")

    def to_frame(self) -> pd.DataFrame:
        changes = list(self.attention_changes) or [math.nan] * (len(self.entries) - 1)
        return pd.DataFrame(
            {
                "date": self.dates,
                "net_flow": [f for _, f in self.entries],
                "delta_attention": [math.nan] + changes,
                "cumulative_capital": self.cumulative_capital().to_numpy(),
            }
        )

    def to_csv(self, path: Union[str, Path], config_hash: str) -> Path:
        frame = self.to_frame()
        frame["date"] = frame["date"].dt.strftime("%Y-%m-%d")
        return write_csv(frame, Path(path), config_hash)


def _window_mean(
    scores: pd.Series, start: pd.Timestamp, end: pd.Timestamp
) -> float:
    """[start, end) の平均。観測がなければ直前の値、それもなければ最初の値"""
    window = scores.loc[(scores.index >= start) & (scores.index < end)]
    if not window.empty:
        return float(window.mean())
    previous = scores.loc[scores.index < end]
    if not previous.empty:
        return float(previous.iloc[-1])
    return float(scores.iloc[0])


def attention_change(attention: AttentionSeries, date: DateLike) -> float:
    """
    月次注目度の変化

    date 直前1か月の平均からその前の1か月の平均を引いた値。
    """
    date = to_date(date)
    month_ago = date - relativedelta(months=1)
    two_months_ago = date - relativedelta(months=2)
    current = _window_mean(attention.scores, month_ago, date)
    previous = _window_mean(attention.scores, two_months_ago, month_ago)
    return current - previous


def generate_flows(
    attention: AttentionSeries,
    rebalance_dates: Sequence[DateLike],
    params: FlowModelParams,
) -> FlowSchedule:
    """
    資金フロースケジュールの生成

    net_flow_t = beta_up·max(Δ注目度,0)·C/100 + beta_down·min(Δ注目度,0)·C/100 + ノイズ
    ノイズは N(0, noise_scale) で、シードから一括生成する。

    Args:
        attention: 注目度指数
        rebalance_dates: リバランス日（先頭が t0）
        params: モデルパラメータ

    Returns:
        FlowSchedule: 先頭が初期資本のスケジュール
    """
    dates = [to_date(d) for d in rebalance_dates]
    if not dates:
        raise ValueError("リバランス日がありません")
    if len(attention) == 0:
        raise ValueError("注目度指数が空です")
    coverage_end = attention.last_date + pd.Timedelta(days=ATTENTION_COVERAGE_SLACK_DAYS)
    for date in dates:
        if date < attention.first_date or date > coverage_end:
            raise ValueError(
                f"{date:%Y-%m-%d} は注目度指数の範囲 "
                f"{attention.first_date:%Y-%m-%d} - {attention.last_date:%Y-%m-%d} 外です"
            )

    rng = np.random.default_rng(params.seed)
    noise = rng.normal(0.0, params.noise_scale, size=len(dates) - 1)
    unit = params.initial_capital / 100.0

    entries: List[Tuple[pd.Timestamp, float]] = [(dates[0], params.initial_capital)]
    changes: List[float] = []
    for date, shock in zip(dates[1:], noise):
        delta = attention_change(attention, date)
        flow = (
            params.beta_up * max(delta, 0.0) * unit
            + params.beta_down * min(delta, 0.0) * unit
            + float(shock)
        )
        entries.append((date, flow))
        changes.append(delta)

    schedule = FlowSchedule(
        entries=tuple(entries),
        initial_capital=params.initial_capital,
        attention_changes=tuple(changes),
    )
    total = math.fsum(f for _, f in entries[1:])
    logger.info(f"資金フロー生成: {len(dates) - 1}回, 純フロー合計 {total:,.2f} (seed={params.seed})")
    return schedule
