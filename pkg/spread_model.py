"""
Spread Model Module for CRIX ETF
スプレッド推定 - 約定データからの実現スプレッド近似・回帰・アルトコインへのスケーリング

このモジュールは、crix-etfプロジェクトのスプレッド関連機能を提供します：
- 複数約定に分かれたテイカー注文からのスプレッド近似
- 取引金額に対するスプレッドのOLS回帰と分位点回帰
- 24h出来高比によるBTCスプレッド曲線のアルトコインへのスケーリング
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from market_data import (
    DateLike,
    MarketDataset,
    MissingObservationError,
    TradeFill,
    fill_groups,
    to_date,
    volume_at,
)

logger = logging.getLogger(__name__)

MEAN = "mean"
DEFAULT_QUANTILE = 0.95
DEFAULT_MAX_ITERATIONS = 200
DEFAULT_TOLERANCE = 1e-10
DEFAULT_REFERENCE_WINDOW_DAYS = 3
DEFAULT_SCALING_EXPONENTS = (2, 5, 10)


class FitError(ValueError):
    """回帰が実行できない（観測不足・説明変数が一定など）"""


class QuantileFitError(FitError):
    """分位点回帰が反復上限内に収束しない"""

    def __init__(self, message: str, diagnostics: Dict[str, Any]):
        self.diagnostics = diagnostics
        super().__init__(f"{message} {diagnostics}")


class SpreadScalingError(ValueError):
    """出来高によるスケーリングができない"""


@dataclass(frozen=True)
class SpreadObservation:
    """テイカー注文1件分のスプレッド近似"""

    notional: float
    spread_fraction: float
    asset: str = ""
    taker_order_id: str = ""
    n_fills: int = 0


@dataclass(frozen=True)
class SpreadCurve:
    """
    スプレッド（約定価格に対する比率）の取引金額に対するアフィンモデル

    quantile は (0,1) の分位点水準、または平均回帰を表す "mean"。
    """

    intercept: float
    slope: float
    quantile: Union[float, str] = MEAN
    asset: str = "BTC"
    reference_date: Optional[pd.Timestamp] = None
    reference_volume_24h: Optional[float] = None

    def __post_init__(self) -> None:
        if self.quantile != MEAN:
            if not isinstance(self.quantile, (int, float)) or not 0 < float(self.quantile) < 1:
                raise ValueError(f"quantile は (0,1) または 'mean' である必要があります: {self.quantile}")
        if self.reference_volume_24h is not None and not self.reference_volume_24h > 0:
            raise ValueError("基準24h出来高は正の値である必要があります")

    @property
    def label(self) -> str:
        return MEAN if self.quantile == MEAN else f"q{round(float(self.quantile) * 100):02d}"

    def with_reference(self, date: DateLike, volume: float) -> "SpreadCurve":
        return replace(self, reference_date=to_date(date), reference_volume_24h=float(volume))

    def to_json(self) -> Dict[str, Any]:
        return {
            "asset": self.asset,
            "quantile": self.quantile,
            "intercept": self.intercept,
            "slope": self.slope,
            "reference_date": (
                self.reference_date.strftime("%Y-%m-%d") if self.reference_date is not None else None
            ),
            "reference_volume_24h": self.reference_volume_24h,
        }

    @classmethod
    def from_json(cls, payload: Mapping[str, Any]) -> "SpreadCurve":
        quantile = payload.get("quantile", MEAN)
        reference_date = payload.get("reference_date")
        volume = payload.get("reference_volume_24h")
        return cls(
            intercept=float(payload["intercept"]),
            slope=float(payload["slope"]),
            quantile=quantile if quantile == MEAN else float(quantile),
            asset=payload.get("asset", "BTC"),
            reference_date=to_date(reference_date) if reference_date else None,
            reference_volume_24h=float(volume) if volume is not None else None,
        )


@dataclass(frozen=True)
class FitDiagnostics:
    """回帰の診断値"""

    label: str
    n_observations: int
    loss: float
    share_above: float
    notional_min: float
    notional_max: float


# ---------------------------------------------------------------------------
# 観測の抽出
# ---------------------------------------------------------------------------


def extract_spread_observations(
    trades: Sequence[TradeFill], price_weighting: str = "equal"
) -> List[SpreadObservation]:
    """
    複数の相手方に約定したテイカー注文からスプレッドを近似

    spread_fraction = (最大約定価格 − 最小約定価格) / 平均約定価格。
    約定が1件だけの注文は対象外。

    Args:
        trades: 約定（タイムスタンプ昇順）
        price_weighting: 平均価格の重み付け "equal"（単純平均）または "quantity"（数量加重）
    """
    if price_weighting not in ("equal", "quantity"):
        raise ValueError(f"price_weighting は 'equal' か 'quantity' です: {price_weighting}")

    observations = []
    for (asset, order_id), fills in fill_groups(tuple(trades)).items():
        if len(fills) < 2:
            continue
        prices = np.array([f.price for f in fills])
        quantities = np.array([f.quantity for f in fills])
        if price_weighting == "quantity":
            mean_price = float(np.average(prices, weights=quantities))
        else:
            mean_price = float(prices.mean())
        observations.append(
            SpreadObservation(
                notional=math.fsum(prices * quantities),
                spread_fraction=float(prices.max() - prices.min()) / mean_price,
                asset=asset,
                taker_order_id=order_id,
                n_fills=len(fills),
            )
        )
    logger.info(f"スプレッド観測: {len(observations)}件（約定 {len(trades)}件から）")
    return observations


def observations_frame(observations: Sequence[SpreadObservation]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (o.asset, o.taker_order_id, o.n_fills, o.notional, o.spread_fraction)
            for o in observations
        ],
        columns=["asset", "taker_order_id", "n_fills", "notional", "spread_fraction"],
    )


def _design(observations: Sequence[SpreadObservation]) -> Tuple[np.ndarray, np.ndarray]:
    if len(observations) < 2:
        raise FitError(f"回帰には2件以上の観測が必要です（{len(observations)}件）")
    x = np.array([o.notional for o in observations], dtype=float)
    y = np.array([o.spread_fraction for o in observations], dtype=float)
    if np.ptp(x) == 0:
        raise FitError("取引金額がすべて同じためデザイン行列がランク落ちしています")
    return x, y


def pinball_loss(residuals: np.ndarray, tau: float) -> float:
    """チェック損失 Σ ρ_τ(r)、ρ_τ(r) = r·(τ − 1{r<0})"""
    r = np.asarray(residuals, dtype=float)
    return math.fsum(np.where(r >= 0, tau * r, (tau - 1.0) * r))


# ---------------------------------------------------------------------------
# 回帰
# ---------------------------------------------------------------------------


def _standardize(x: np.ndarray) -> Tuple[np.ndarray, float, float]:
    center = float(x.mean())
    scale = float(x.std())
    return (x - center) / scale, center, scale


def fit_ols(observations: Sequence[SpreadObservation], asset: str = "BTC") -> SpreadCurve:
    """spread_fraction を取引金額に回帰する最小二乗アフィンフィット"""
    x, y = _design(observations)
    xs, center, scale = _standardize(x)
    design = np.column_stack([np.ones_like(xs), xs])
    (b0, b1), *_ = np.linalg.lstsq(design, y, rcond=None)
    slope = b1 / scale
    return SpreadCurve(intercept=float(b0 - slope * center), slope=float(slope), quantile=MEAN, asset=asset)


def _irls_quantile(
    x: np.ndarray, y: np.ndarray, tau: float, max_iterations: int, tolerance: float
) -> Tuple[float, float, int, bool]:
    """平滑化幅を縮小しながらの反復重み付き最小二乗（標準化座標で計算）"""
    xs, center, scale = _standardize(x)
    design = np.column_stack([np.ones_like(xs), xs])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)

    residuals = y - design @ beta
    floor = np.finfo(float).eps * max(1.0, float(np.abs(y).max()))
    smoothing = max(float(np.mean(np.abs(residuals))), floor)
    min_smoothing = max(smoothing * 1e-8, floor)

    converged = False
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        residuals = y - design @ beta
        weights = np.where(residuals >= 0, tau, 1.0 - tau) / np.maximum(np.abs(residuals), smoothing)
        weighted = design * weights[:, None]
        try:
            updated = np.linalg.solve(design.T @ weighted, weighted.T @ y)
        except np.linalg.LinAlgError:
            break
        step = float(np.max(np.abs(updated - beta)))
        beta = updated
        smoothing = max(smoothing * 0.5, min_smoothing)
        if step < tolerance * (1.0 + float(np.max(np.abs(beta)))):
            converged = True
            break

    slope = beta[1] / scale
    return float(beta[0] - slope * center), float(slope), iteration, converged


def _best_line_through(
    x: np.ndarray, y: np.ndarray, pivot: int, tau: float
) -> Tuple[int, float]:
    """
    観測 pivot を通る直線のうちチェック損失最小のもの

    傾き s の損失は各点の傾き m_k を折れ点とする凸な区分線形関数なので、
    右微分が初めて0以上になる折れ点が最適（重み付き分位点）。

    Returns:
        Tuple[int, float]: 相手の観測番号と傾き
    """
    dx = x - x[pivot]
    dy = y - y[pivot]
    idx = np.flatnonzero(dx != 0)
    slopes = dy[idx] / dx[idx]
    weights = np.abs(dx[idx])
    levels = np.where(dx[idx] > 0, tau, 1.0 - tau)

    order = np.argsort(slopes, kind="mergesort")
    slopes, weights, levels, idx = slopes[order], weights[order], levels[order], idx[order]
    right = np.cumsum(weights * (1.0 - levels))
    left = weights * levels
    remaining = left.sum() - np.cumsum(left)
    position = int(np.argmax(right - remaining >= 0))
    return int(idx[position]), float(slopes[position])


def _refine_vertex(
    x: np.ndarray,
    y: np.ndarray,
    tau: float,
    intercept: float,
    slope: float,
    max_pivots: int,
) -> Tuple[float, float, int]:
    """
    2観測を通る直線（頂点解）上での厳密化

    各頂点で2点のいずれかを固定した回転で改善しなくなれば大域最適。
    """
    residuals = y - (intercept + slope * x)
    order = np.argsort(np.abs(residuals), kind="mergesort")
    first = int(order[0])
    second = next(int(j) for j in order[1:] if x[j] != x[first])

    pair = (first, second)
    best_slope = (y[second] - y[first]) / (x[second] - x[first])
    best_intercept = y[first] - best_slope * x[first]
    best_loss = pinball_loss(y - (best_intercept + best_slope * x), tau)

    pivots = 0
    while pivots < max_pivots:
        improved = False
        for pivot in pair:
            pivots += 1
            partner, candidate_slope = _best_line_through(x, y, pivot, tau)
            candidate_intercept = y[pivot] - candidate_slope * x[pivot]
            loss = pinball_loss(y - (candidate_intercept + candidate_slope * x), tau)
            if loss < best_loss - 1e-12 * abs(best_loss):
                pair = (pivot, partner)
                best_slope, best_intercept, best_loss = candidate_slope, candidate_intercept, loss
                improved = True
                break
        if not improved:
            return float(best_intercept), float(best_slope), pivots

    raise QuantileFitError(
        "分位点回帰の頂点探索が上限に達しました。",
        {"tau": tau, "pivots": pivots, "loss": best_loss, "n": len(x)},
    )


def fit_quantile(
    observations: Sequence[SpreadObservation],
    tau: float = DEFAULT_QUANTILE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    tolerance: float = DEFAULT_TOLERANCE,
    asset: str = "BTC",
) -> SpreadCurve:
    """
    チェック損失を最小化する分位点回帰

    IRLSで近似解を求め、その近傍の2観測を通る直線から頂点探索で厳密解に仕上げる。
    入力が同じなら結果は決定的。
    """
    if not 0 < tau < 1:
        raise ValueError(f"tau は (0,1) の範囲である必要があります: {tau}")
    x, y = _design(observations)

    intercept, slope, iterations, converged = _irls_quantile(x, y, tau, max_iterations, tolerance)
    if not converged:
        logger.debug(f"IRLS が {iterations} 回で収束しませんでした（頂点探索で継続）")

    intercept, slope, pivots = _refine_vertex(
        x, y, tau, intercept, slope, max_pivots=max(100, 10 * len(x))
    )
    logger.debug(f"分位点回帰 tau={tau}: IRLS {iterations}回, 頂点探索 {pivots}回")
    return SpreadCurve(intercept=intercept, slope=slope, quantile=float(tau), asset=asset)


def fit_diagnostics(
    curve: SpreadCurve, observations: Sequence[SpreadObservation]
) -> FitDiagnostics:
    """損失（平均回帰は残差平方和、分位点回帰はチェック損失）と直線より上の観測比率"""
    x = np.array([o.notional for o in observations], dtype=float)
    y = np.array([o.spread_fraction for o in observations], dtype=float)
    residuals = y - (curve.intercept + curve.slope * x)
    if curve.quantile == MEAN:
        loss = math.fsum(residuals**2)
    else:
        loss = pinball_loss(residuals, float(curve.quantile))
    return FitDiagnostics(
        label=curve.label,
        n_observations=len(observations),
        loss=loss,
        share_above=float(np.mean(residuals > 0)) if len(observations) else math.nan,
        notional_min=float(x.min()) if len(x) else math.nan,
        notional_max=float(x.max()) if len(x) else math.nan,
    )


def predict_spread(curve: SpreadCurve, notional: float) -> float:
    """取引金額に対するスプレッド比率（負の予測は0で下限）"""
    if notional < 0:
        raise ValueError(f"取引金額は0以上である必要があります: {notional}")
    return max(0.0, curve.intercept + curve.slope * notional)


# ---------------------------------------------------------------------------
# 出来高によるスケーリング
# ---------------------------------------------------------------------------


def reference_volume(
    dataset: MarketDataset,
    asset: str,
    date: DateLike,
    window_days: int = DEFAULT_REFERENCE_WINDOW_DAYS,
) -> float:
    """基準日±window_days日の24h出来高の平均"""
    date = to_date(date)
    if asset not in dataset.volumes.columns:
        raise MissingObservationError(f"{asset}: 24h出来高のデータがありません")
    window = dataset.volumes[asset].loc[
        date - pd.Timedelta(days=window_days) : date + pd.Timedelta(days=window_days)
    ].dropna()
    if window.empty:
        raise MissingObservationError(
            f"{asset}: {date:%Y-%m-%d} ±{window_days}日に24h出来高の観測がありません"
        )
    return float(window.mean())


def scaling_factor(reference_volume_24h: float, target_volume_24h: float, a: float) -> float:
    """スケーリング係数 (24hTV_基準 / 24hTV_対象)^(1/a)"""
    if not a > 0:
        raise ValueError(f"スケーリング指数 a は正の値である必要があります: {a}")
    if not reference_volume_24h > 0:
        raise SpreadScalingError("基準24h出来高が0以下です")
    if not target_volume_24h > 0:
        raise SpreadScalingError("対象銘柄の24h出来高が0以下です")
    return (reference_volume_24h / target_volume_24h) ** (1.0 / a)


def _curve_reference_volume(base: SpreadCurve, dataset: MarketDataset, window_days: int) -> float:
    if base.reference_volume_24h is not None:
        return base.reference_volume_24h
    if base.reference_date is None:
        raise SpreadScalingError("スプレッド曲線に基準日も基準出来高もありません")
    return reference_volume(dataset, base.asset, base.reference_date, window_days)


def scale_spread(
    base: SpreadCurve,
    target_asset: str,
    dataset: MarketDataset,
    date: DateLike,
    a: float,
    notional: float,
    window_days: int = DEFAULT_REFERENCE_WINDOW_DAYS,
) -> float:
    """
    BTCのスプレッド曲線を対象銘柄・日付にスケーリングしたスプレッド比率

    spread = predict_spread(base, notional) × (24hTV_BTC,基準 / 24hTV_対象,日付)^(1/a)
    """
    reference = _curve_reference_volume(base, dataset, window_days)
    try:
        target = volume_at(dataset, target_asset, date)
    except MissingObservationError as e:
        raise SpreadScalingError(str(e)) from e
    return predict_spread(base, notional) * scaling_factor(reference, target, a)


def scaling_factor_series(
    dataset: MarketDataset,
    asset: str,
    reference_volume_24h: float,
    a: float,
    smoothing_days: int = 7,
) -> pd.DataFrame:
    """日次スケーリング係数と smoothing_days 日移動平均"""
    volumes = dataset.volumes[asset].dropna()
    volumes = volumes[volumes > 0]
    factors = (reference_volume_24h / volumes) ** (1.0 / a)
    return pd.DataFrame(
        {
            "date": volumes.index,
            "asset": asset,
            "a": a,
            "factor": factors.to_numpy(),
            "smoothed": factors.rolling(smoothing_days, min_periods=1).mean().to_numpy(),
        }
    )


class VolumeScaledSpreadModel:
    """バックテスト用のスプレッド見積り（基準曲線×出来高スケーリング）"""

    def __init__(
        self,
        base: SpreadCurve,
        dataset: MarketDataset,
        a: float,
        window_days: int = DEFAULT_REFERENCE_WINDOW_DAYS,
    ):
        if not a > 0:
            raise ValueError(f"スケーリング指数 a は正の値である必要があります: {a}")
        self.base = base
        self.dataset = dataset
        self.a = a
        self.reference = _curve_reference_volume(base, dataset, window_days)

    def spread_fraction(self, asset: str, date: DateLike, notional: float) -> float:
        try:
            target = volume_at(self.dataset, asset, date)
        except MissingObservationError as e:
            raise SpreadScalingError(str(e)) from e
        return predict_spread(self.base, notional) * scaling_factor(self.reference, target, self.a)
