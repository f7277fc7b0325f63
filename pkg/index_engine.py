"""
Index Engine Module for CRIX ETF
インデックス算出 - ラスパイレス型指数・AICによる構成銘柄数の選択・月次ウェイト更新

このモジュールは、crix-etfプロジェクトの指数計算機能を提供します：
- 除数（divisor）で連続性を保つラスパイレス型指数値
- 時価総額上位k銘柄ポートフォリオの対数リターン
- AICによる構成銘柄数kの選択（四半期ごと）
- 時価総額比例のウェイト更新（月次）
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dateutil.relativedelta import relativedelta

from market_data import (
    DateLike,
    MarketDataset,
    MissingObservationError,
    observation_at,
    to_date,
)

logger = logging.getLogger(__name__)

DEFAULT_BASE_LEVEL = 1000.0
DEFAULT_MAX_CONSTITUENTS = 30
DEFAULT_SELECTION_WINDOW_MONTHS = 3
RECONSTITUTION_MONTHS = (1, 4, 7, 10)
WEIGHT_TOLERANCE = 1e-12
# 全市場リターンに対してこの相対誤差以下の残差は丸め誤差とみなして0にする
RESIDUAL_RTOL = 1e-12


class SelectionError(ValueError):
    """構成銘柄選択が実行できない（データ不足など）"""


@dataclass(frozen=True)
class IndexState:
    """
    ある日付時点の指数状態

    base_quantities は直近の再構成/ウェイト更新時点の数量 Q_i0、
    divisor は指数の連続性を保つ除数（index = Σ P_it·Q_i0 / divisor）。
    """

    as_of: pd.Timestamp
    constituents: Tuple[str, ...]
    base_quantities: Dict[str, float]
    weights: Dict[str, float]
    divisor: float

    def __post_init__(self) -> None:
        if not self.constituents:
            raise ValueError("構成銘柄が空です")
        if set(self.weights) != set(self.constituents) or set(self.base_quantities) != set(
            self.constituents
        ):
            raise ValueError("weights/base_quantities のキーが構成銘柄と一致しません")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("ウェイトは0以上である必要があります")
        total = math.fsum(self.weights.values())
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError(f"ウェイトの合計が1ではありません: {total!r}")
        if not self.divisor > 0:
            raise ValueError("除数は正の値である必要があります")

    def to_json(self) -> Dict[str, Any]:
        return {
            "as_of": self.as_of.strftime("%Y-%m-%d"),
            "constituents": [
                {
                    "asset": asset,
                    "weight": self.weights[asset],
                    "base_quantity": self.base_quantities[asset],
                }
                for asset in self.constituents
            ],
            "divisor": self.divisor,
        }

    @classmethod
    def from_json(cls, payload: Mapping[str, Any]) -> "IndexState":
        entries = payload["constituents"]
        return cls(
            as_of=to_date(payload["as_of"]),
            constituents=tuple(e["asset"] for e in entries),
            base_quantities={e["asset"]: float(e["base_quantity"]) for e in entries},
            weights={e["asset"]: float(e["weight"]) for e in entries},
            divisor=float(payload["divisor"]),
        )


@dataclass(frozen=True)
class SelectionResult:
    """AICによる構成銘柄数選択の結果"""

    k_star: int
    candidate_ks: Tuple[int, ...]
    aic_values: Tuple[float, ...]
    residual_norms: Tuple[float, ...]
    universe: Tuple[str, ...]
    window_start: pd.Timestamp
    window_end: pd.Timestamp

    @property
    def universe_size(self) -> int:
        return len(self.universe)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "k": self.candidate_ks,
                "aic": self.aic_values,
                "residual_norm": self.residual_norms,
                "selected": [k == self.k_star for k in self.candidate_ks],
            }
        )


def index_value(state: IndexState, prices_t: Mapping[str, float]) -> float:
    """
    ラスパイレス型指数値 Σ_i P_it·Q_i0 / divisor

    Args:
        state: 指数状態
        prices_t: 銘柄→価格

    Returns:
        float: 指数値（正）
    """
    terms = []
    for asset in state.constituents:
        if asset not in prices_t:
            raise KeyError(f"{asset}: 構成銘柄の価格がありません")
        price = float(prices_t[asset])
        if not price > 0:
            raise ValueError(f"{asset}: 価格は正の値である必要があります ({price})")
        terms.append(price * state.base_quantities[asset])
    return math.fsum(terms) / state.divisor


def _snapshot(
    dataset: MarketDataset, assets: Sequence[str], date: pd.Timestamp
) -> Tuple[Dict[str, float], Dict[str, float]]:
    prices: Dict[str, float] = {}
    caps: Dict[str, float] = {}
    for asset in assets:
        obs = observation_at(dataset, asset, date)
        prices[asset] = obs.price
        caps[asset] = obs.market_cap
    return prices, caps


def _build_state(
    as_of: pd.Timestamp,
    constituents: Sequence[str],
    prices: Mapping[str, float],
    caps: Mapping[str, float],
    level: float,
) -> IndexState:
    total_cap = math.fsum(caps[a] for a in constituents)
    if not total_cap > 0:
        raise SelectionError(f"{as_of:%Y-%m-%d}: 構成銘柄の時価総額の合計が0です")
    weights = {a: caps[a] / total_cap for a in constituents}
    # Q_i0 = 時価総額 / 価格（= 流通量）とすると P_i0·Q_i0 の比率が時価総額ウェイトに一致する
    quantities = {a: caps[a] / prices[a] for a in constituents}
    base_value = math.fsum(prices[a] * quantities[a] for a in constituents)
    return IndexState(
        as_of=as_of,
        constituents=tuple(constituents),
        base_quantities=quantities,
        weights=weights,
        divisor=base_value / level,
    )


# ---------------------------------------------------------------------------
# 構成銘柄数の選択
# ---------------------------------------------------------------------------


def _eligible_universe(
    dataset: MarketDataset, start: pd.Timestamp, end: pd.Timestamp
) -> Tuple[List[str], pd.DataFrame, pd.DataFrame]:
    """期間中すべての日に価格と時価総額がある銘柄（期間初日の時価総額で降順）"""
    if end < start:
        raise SelectionError(f"期間が空です: {start:%Y-%m-%d} - {end:%Y-%m-%d}")
    prices = dataset.prices.loc[start:end]
    caps = dataset.market_caps.loc[start:end]
    if len(prices) < 2:
        raise SelectionError(
            f"{start:%Y-%m-%d} - {end:%Y-%m-%d}: リターン計算には2日以上のデータが必要です"
        )
    complete = prices.notna().all() & caps.notna().all()
    eligible = [a for a in prices.columns if complete[a]]
    first_caps = caps.iloc[0]
    # 同額の場合はティッカー順で決定的に並べる
    ranked = sorted(eligible, key=lambda a: (-first_caps[a], a))
    return ranked, prices[ranked], caps[ranked]


def _cap_weighted_log_returns(prices: pd.DataFrame, caps: pd.DataFrame) -> pd.Series:
    """前日時価総額ウェイトによる価格相対の加重平均の対数"""
    previous_caps = caps.shift(1).iloc[1:]
    totals = previous_caps.sum(axis=1)
    if (totals <= 0).any():
        bad = totals.index[(totals <= 0).to_numpy()][0]
        raise SelectionError(f"{bad:%Y-%m-%d}: ポートフォリオの時価総額の合計が0です")
    weights = previous_caps.div(totals, axis=0)
    relatives = (prices / prices.shift(1)).iloc[1:]
    return np.log((weights * relatives).sum(axis=1)).rename("log_return")


def portfolio_log_returns(
    dataset: MarketDataset, k: int, date_range: Tuple[DateLike, DateLike]
) -> pd.Series:
    """
    時価総額上位k銘柄（期間初日基準）の時価総額加重ポートフォリオの日次対数リターン

    Args:
        dataset: 市場データ
        k: 構成銘柄数
        date_range: (開始日, 終了日) 両端含む

    Returns:
        pd.Series: 日次対数リターン（2日目以降）
    """
    start, end = to_date(date_range[0]), to_date(date_range[1])
    ranked, prices, caps = _eligible_universe(dataset, start, end)
    if not 1 <= k <= len(ranked):
        raise SelectionError(
            f"k={k} は期間中データが揃う銘柄数 {len(ranked)} の範囲外です"
        )
    top = ranked[:k]
    return _cap_weighted_log_returns(prices[top], caps[top])


def gaussian_aic(residuals: np.ndarray, k: int) -> float:
    """
    残差を独立同分布の正規分布（分散は最尤推定）とみなしたAIC = −log L + 2k

    残差が恒等的に0の場合は尤度が発散するため −inf を返す。
    """
    n = len(residuals)
    sigma2 = float(np.mean(np.square(residuals)))
    if sigma2 <= np.finfo(float).tiny:
        return -math.inf
    neg_log_likelihood = 0.5 * n * (math.log(2.0 * math.pi * sigma2) + 1.0)
    return neg_log_likelihood + 2.0 * k


def select_constituent_count(
    dataset: MarketDataset,
    candidate_ks: Optional[Sequence[int]],
    date_range: Tuple[DateLike, DateLike],
    max_constituents: int = DEFAULT_MAX_CONSTITUENTS,
) -> SelectionResult:
    """
    AICで構成銘柄数kを選択

    残差 ε̂(k)_t = ε(K)^TM_t − ε(k)^CCP_t に対するAICを最小化するkを返す。
    同値の場合は小さいkを優先する。

    Args:
        dataset: 市場データ
        candidate_ks: 候補k（None なら 1..min(K, max_constituents)）
        date_range: 推定期間
        max_constituents: 既定候補の上限

    Returns:
        SelectionResult: 選択結果
    """
    start, end = to_date(date_range[0]), to_date(date_range[1])
    ranked, prices, caps = _eligible_universe(dataset, start, end)
    universe = len(ranked)
    if universe == 0:
        raise SelectionError(f"{start:%Y-%m-%d} - {end:%Y-%m-%d}: データが揃う銘柄がありません")

    if candidate_ks is None:
        ks = list(range(1, min(universe, max_constituents) + 1))
    else:
        ks = sorted(set(int(k) for k in candidate_ks))
    if not ks:
        raise SelectionError("候補kが空です")
    infeasible = [k for k in ks if not 1 <= k <= universe]
    if infeasible:
        raise SelectionError(f"候補k={infeasible} は銘柄数 {universe} の範囲外です")

    total_market = _cap_weighted_log_returns(prices, caps).to_numpy()
    zero_level = RESIDUAL_RTOL * float(np.max(np.abs(total_market)))

    # kごとの評価は独立だが、結果の再現性のため昇順で逐次評価する
    aic_values: List[float] = []
    norms: List[float] = []
    for k in ks:
        top = ranked[:k]
        residuals = total_market - _cap_weighted_log_returns(prices[top], caps[top]).to_numpy()
        if np.max(np.abs(residuals)) <= zero_level:
            residuals = np.zeros_like(residuals)
        aic_values.append(gaussian_aic(residuals, k))
        norms.append(float(np.sum(np.square(residuals))))

    best = 0
    for i in range(1, len(ks)):
        if aic_values[i] < aic_values[best]:
            best = i

    result = SelectionResult(
        k_star=ks[best],
        candidate_ks=tuple(ks),
        aic_values=tuple(aic_values),
        residual_norms=tuple(norms),
        universe=tuple(ranked),
        window_start=start,
        window_end=end,
    )
    logger.info(
        f"構成銘柄数選択: k*={result.k_star} (K={universe}, "
        f"期間 {start:%Y-%m-%d} - {end:%Y-%m-%d})"
    )
    if result.k_star == universe > 1 and math.isinf(aic_values[best]):
        logger.warning(
            f"構成銘柄数選択: 全銘柄 (K={universe}) で市場全体と完全に一致するため k*=K です。"
            "候補kを K 未満に制限すると選択が有効になります"
        )
    return result


# ---------------------------------------------------------------------------
# 再構成・ウェイト更新
# ---------------------------------------------------------------------------


def is_reconstitution_date(
    date: DateLike, months: Sequence[int] = RECONSTITUTION_MONTHS
) -> bool:
    """四半期の再構成月（既定 1/4/7/10月）に属する日付か"""
    return to_date(date).month in months


def reconstitute(
    dataset: MarketDataset,
    date: DateLike,
    candidate_ks: Optional[Sequence[int]] = None,
    previous_state: Optional[IndexState] = None,
    base_level: float = DEFAULT_BASE_LEVEL,
    window_months: int = DEFAULT_SELECTION_WINDOW_MONTHS,
    max_constituents: int = DEFAULT_MAX_CONSTITUENTS,
) -> Tuple[IndexState, SelectionResult]:
    """
    構成銘柄の再構成

    直前 window_months か月の日次データでkを選び、再構成日の時価総額上位k銘柄を
    時価総額比例のウェイトで採用する。previous_state があれば指数が連続するよう
    除数を決め、なければ base_level から開始する。

    Returns:
        Tuple[IndexState, SelectionResult]: 新しい指数状態と選択結果
    """
    date = to_date(date)
    window = (date - relativedelta(months=window_months), date - pd.Timedelta(days=1))
    selection = select_constituent_count(dataset, candidate_ks, window, max_constituents)

    # 推定期間の母集団のうち再構成日に観測がある銘柄を時価総額順に並べ、上位k*を採用
    available: List[Tuple[str, float, float]] = []
    for asset in selection.universe:
        try:
            obs = observation_at(dataset, asset, date)
        except MissingObservationError:
            continue
        available.append((asset, obs.price, obs.market_cap))
    available.sort(key=lambda item: (-item[2], item[0]))
    if len(available) < selection.k_star:
        raise SelectionError(
            f"{date:%Y-%m-%d}: 観測がある銘柄数 {len(available)} が k*={selection.k_star} に足りません"
        )

    chosen = available[: selection.k_star]
    constituents = [a for a, _, _ in chosen]
    prices = {a: p for a, p, _ in chosen}
    caps = {a: c for a, _, c in chosen}

    if previous_state is None:
        level = base_level
    else:
        old_prices, _ = _snapshot(dataset, previous_state.constituents, date)
        level = index_value(previous_state, old_prices)

    state = _build_state(date, constituents, prices, caps, level)
    logger.info(
        f"{date:%Y-%m-%d} 再構成: {len(constituents)}銘柄 "
        f"({', '.join(constituents[:5])}{' ...' if len(constituents) > 5 else ''})"
    )
    return state, selection


def reweight(state: IndexState, dataset: MarketDataset, date: DateLike) -> IndexState:
    """
    構成銘柄を変えずにウェイトを現在の時価総額比に更新

    更新日の旧状態の指数値を新状態でも再現するよう除数を調整する。
    """
    date = to_date(date)
    prices, caps = _snapshot(dataset, state.constituents, date)
    level = index_value(state, prices)
    return _build_state(date, state.constituents, prices, caps, level)


def index_series(
    dataset: MarketDataset, states: Sequence[IndexState], dates: Sequence[DateLike]
) -> pd.Series:
    """
    日次指数値の系列

    各日付はその日以前で最新の指数状態で評価する（価格は鮮度ウィンドウ内で補完）。
    """
    if not states:
        raise ValueError("指数状態がありません")
    ordered = sorted(states, key=lambda s: s.as_of)
    index = pd.DatetimeIndex([to_date(d) for d in dates], name="date")
    prices = dataset.filled_prices.reindex(index)
    values = pd.Series(np.nan, index=index, name="index_value")

    for i, state in enumerate(ordered):
        segment_end = ordered[i + 1].as_of if i + 1 < len(ordered) else None
        mask = index >= state.as_of
        if segment_end is not None:
            mask &= index < segment_end
        if not mask.any():
            continue
        segment = prices.loc[mask, list(state.constituents)]
        if segment.isna().any().any():
            row, asset = segment.isna().stack(future_stack=True).idxmax()
            raise MissingObservationError(f"{asset}: {row:%Y-%m-%d} の価格がありません")
        quantities = np.array([state.base_quantities[a] for a in state.constituents])
        values.loc[mask] = segment.to_numpy() @ quantities / state.divisor

    before_first = index < ordered[0].as_of
    return values.loc[~before_first]
