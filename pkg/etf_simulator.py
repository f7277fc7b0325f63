"""
ETF Simulator Module for CRIX ETF
ETFシミュレーション - 月次リバランス・取引コスト・資金流出入を含むバックテスト

このモジュールは、crix-etfプロジェクトのバックテスト機能を提供します：
- 指数ウェイトに従った初期配分と月次リバランス
- 手数料とスプレッドの差し引き（1回の再計算による近似）
- 資金流出入の吸収（出金は清算価値で打ち切り）
- 資金フローで膨らませた指数複製・ベンチマークとの比較系列
- シャープレシオ・回転率・コスト統計
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from capital_flows import FlowModelParams, FlowSchedule, generate_flows
from cost_model import DEFAULT_SPREAD_SHARE, FeeSchedule, fee_rate, trade_cost
from crix_lib import ConfigManager, read_json
from index_engine import (
    DEFAULT_BASE_LEVEL,
    DEFAULT_MAX_CONSTITUENTS,
    DEFAULT_SELECTION_WINDOW_MONTHS,
    RECONSTITUTION_MONTHS,
    IndexState,
    SelectionError,
    SelectionResult,
    index_series,
    is_reconstitution_date,
    reconstitute,
    reweight,
)
from market_data import (
    DateLike,
    MarketDataset,
    MissingObservationError,
    observation_at,
    rebalance_dates,
    to_date,
)
from spread_model import (
    DEFAULT_REFERENCE_WINDOW_DAYS,
    DEFAULT_SCALING_EXPONENTS,
    SpreadCurve,
    SpreadScalingError,
    VolumeScaledSpreadModel,
)

logger = logging.getLogger(__name__)

TRADING_DAYS_PER_YEAR = 365
ZERO_STD_THRESHOLD = 1e-12
MIN_TRADE_FRACTION = 1e-12
PROPORTIONALITY_TOLERANCE = 1e-9


class SimulationError(RuntimeError):
    """バックテスト中のエラー（リバランス日と銘柄を付与）"""

    def __init__(self, message: str, date: Optional[pd.Timestamp] = None, asset: Optional[str] = None):
        self.date = date
        self.asset = asset
        location = " ".join(
            part for part in (f"{date:%Y-%m-%d}" if date is not None else "", asset or "") if part
        )
        super().__init__(f"{location}: {message}" if location else message)


class SpreadModel(Protocol):
    def spread_fraction(self, asset: str, date: DateLike, notional: float) -> float: ...


@dataclass(frozen=True)
class Portfolio:
    """保有数量と残余現金"""

    holdings: Dict[str, float] = field(default_factory=dict)
    cash: float = 0.0
    cumulative_fees: float = 0.0
    cumulative_spread_costs: float = 0.0

    def __post_init__(self) -> None:
        negative = [a for a, units in self.holdings.items() if units < 0]
        if negative:
            raise ValueError(f"保有数量が負です（空売り不可）: {negative}")
        if self.cash < 0:
            raise ValueError(f"現金が負です: {self.cash}")

    def value(self, prices: Mapping[str, float]) -> float:
        return math.fsum(units * prices[a] for a, units in self.holdings.items()) + self.cash


@dataclass(frozen=True)
class TradeRecord:
    """1銘柄分の取引とコスト（コストは費用控除前の取引金額に対して計算）"""

    asset: str
    price: float
    notional: float
    fee_rate: float
    fee: float
    spread_fraction: float
    spread_cost: float


@dataclass(frozen=True)
class RebalanceReport:
    date: pd.Timestamp
    pre_value: float
    post_value: float
    deposit: float
    requested_flow: float
    withdrawal_clamped: bool
    reconstituted: bool
    weights: Dict[str, float]
    deltas: Dict[str, float]
    trades: Dict[str, float]
    trade_costs: Tuple[TradeRecord, ...]
    fees: float
    spread_costs: float
    cash: float

    @property
    def n_constituents(self) -> int:
        return len(self.weights)

    @property
    def turnover_two_sided(self) -> float:
        return math.fsum(abs(d) for d in self.deltas.values())

    @property
    def turnover_one_sided(self) -> float:
        return 0.5 * self.turnover_two_sided

    @property
    def delta_sum(self) -> float:
        return math.fsum(self.deltas.values())

    def _delta_weighted(self, attribute: str) -> float:
        weights = [abs(self.deltas.get(t.asset, 0.0)) for t in self.trade_costs]
        total = math.fsum(weights)
        if total == 0:
            return math.nan
        values = [getattr(t, attribute) for t in self.trade_costs]
        return math.fsum(w * v for w, v in zip(weights, values)) / total

    @property
    def weighted_fee_rate(self) -> float:
        """Δ加重平均の手数料率"""
        return self._delta_weighted("fee_rate")

    @property
    def weighted_spread(self) -> float:
        """Δ加重平均のスプレッド比率"""
        return self._delta_weighted("spread_fraction")


@dataclass(frozen=True)
class BacktestConfig:
    """バックテスト設定（config.yaml から構築）"""

    start: pd.Timestamp
    end: pd.Timestamp
    benchmark_asset: str = "BTC"
    base_level: float = DEFAULT_BASE_LEVEL
    max_constituents: int = DEFAULT_MAX_CONSTITUENTS
    candidate_ks: Optional[Tuple[int, ...]] = None
    selection_window_months: int = DEFAULT_SELECTION_WINDOW_MONTHS
    reconstitution_months: Tuple[int, ...] = RECONSTITUTION_MONTHS
    costs_enabled: bool = True
    fee_schedule: FeeSchedule = field(default_factory=FeeSchedule.default)
    spread_share: float = DEFAULT_SPREAD_SHARE
    spread_curve: Optional[SpreadCurve] = None
    reference_window_days: int = DEFAULT_REFERENCE_WINDOW_DAYS
    scaling_exponents: Tuple[float, ...] = DEFAULT_SCALING_EXPONENTS
    flows_enabled: bool = True
    flow_params: FlowModelParams = field(default_factory=FlowModelParams)

    def __post_init__(self) -> None:
        if self.end < self.start:
            raise ValueError(f"終了日 {self.end:%Y-%m-%d} が開始日 {self.start:%Y-%m-%d} より前です")
        if not self.scaling_exponents or any(not a > 0 for a in self.scaling_exponents):
            raise ValueError("スケーリング指数は正の値を1つ以上指定してください")
        if self.spread_share < 0:
            raise ValueError("spread_share は0以上である必要があります")
        if self.costs_enabled and self.spread_curve is None:
            raise ValueError("コストを有効にする場合はスプレッド曲線が必要です")

    @property
    def initial_capital(self) -> float:
        return self.flow_params.initial_capital

    @classmethod
    def from_config(cls, config: ConfigManager) -> "BacktestConfig":
        curve_path = config.resolve_path("spreads.curve_path")
        if curve_path is not None:
            curve = SpreadCurve.from_json(read_json(curve_path))
        else:
            coefficients = config.get("spreads.curve", {}) or {}
            reference_date = config.get("spreads.reference_date")
            curve = SpreadCurve(
                intercept=float(coefficients["intercept"]),
                slope=float(coefficients["slope"]),
                quantile=config.get("spreads.quantile", 0.95),
                asset=config.get("spreads.base_asset", "BTC"),
                reference_date=to_date(reference_date) if reference_date else None,
                reference_volume_24h=coefficients.get("reference_volume_24h"),
            )
        candidate_ks = config.get("index.candidate_ks")
        return cls(
            start=to_date(config.get("backtest.start")),
            end=to_date(config.get("backtest.end")),
            benchmark_asset=config.get("backtest.benchmark_asset", "BTC"),
            base_level=float(config.get("index.base_level", DEFAULT_BASE_LEVEL)),
            max_constituents=int(config.get("index.max_constituents", DEFAULT_MAX_CONSTITUENTS)),
            candidate_ks=tuple(int(k) for k in candidate_ks) if candidate_ks else None,
            selection_window_months=int(
                config.get("index.selection_window_months", DEFAULT_SELECTION_WINDOW_MONTHS)
            ),
            reconstitution_months=tuple(
                config.get("index.reconstitution_months", RECONSTITUTION_MONTHS)
            ),
            costs_enabled=bool(config.get("costs.enabled", True)),
            fee_schedule=FeeSchedule.from_config(config.get("costs.fee_tiers")),
            spread_share=float(config.get("costs.spread_share", DEFAULT_SPREAD_SHARE)),
            spread_curve=curve,
            reference_window_days=int(
                config.get("spreads.reference_window_days", DEFAULT_REFERENCE_WINDOW_DAYS)
            ),
            scaling_exponents=tuple(
                float(a) for a in config.get("spreads.scaling_exponents", DEFAULT_SCALING_EXPONENTS)
            ),
            flows_enabled=bool(config.get("flows.enabled", True)),
            flow_params=FlowModelParams.from_config(config.get("flows", {}) or {}),
        )


@dataclass(frozen=True)
class IndexPath:
    """リバランス日ごとの指数状態"""

    dates: Tuple[pd.Timestamp, ...]
    states: Tuple[IndexState, ...]
    selections: Tuple[Tuple[pd.Timestamp, SelectionResult], ...]
    reconstituted: Tuple[bool, ...]


@dataclass(frozen=True, eq=False)
class SimulationResult:
    """
    バックテスト結果

    series は日次の etf_value / index_value / replication_value / benchmark_value /
    deposit / cost_gap_units（指数単位のコスト差）を列に持つ。
    """

    reports: Tuple[RebalanceReport, ...]
    series: pd.DataFrame
    flows: FlowSchedule
    index_path: IndexPath
    scaling_exponent: Optional[float]
    benchmark_asset: str

    @property
    def etf_value_series(self) -> pd.Series:
        return self.series["etf_value"]

    @property
    def index_series(self) -> pd.Series:
        return self.series["index_value"]

    @property
    def benchmark_series(self) -> pd.Series:
        return self.series["benchmark_value"]

    def reports_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "date": r.date.strftime("%Y-%m-%d"),
                    "pre_value": r.pre_value,
                    "post_value": r.post_value,
                    "deposit": r.deposit,
                    "requested_flow": r.requested_flow,
                    "withdrawal_clamped": r.withdrawal_clamped,
                    "fees": r.fees,
                    "spread_costs": r.spread_costs,
                    "turnover_one_sided": r.turnover_one_sided,
                    "turnover_two_sided": r.turnover_two_sided,
                    "n_constituents": r.n_constituents,
                    "reconstituted": r.reconstituted,
                    "weighted_fee_rate": r.weighted_fee_rate,
                    "weighted_spread": r.weighted_spread,
                    "cash": r.cash,
                }
                for r in self.reports
            ]
        )

    def deltas_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.reports:
            for asset in sorted(set(r.deltas) | set(r.trades)):
                rows.append(
                    {
                        "date": r.date.strftime("%Y-%m-%d"),
                        "asset": asset,
                        "delta": r.deltas.get(asset, 0.0),
                        "trade_notional": r.trades.get(asset, 0.0),
                    }
                )
        return pd.DataFrame(rows, columns=["date", "asset", "delta", "trade_notional"])

    def weights_frame(self) -> pd.DataFrame:
        rows = [
            {"date": r.date.strftime("%Y-%m-%d"), "asset": asset, "weight": weight}
            for r in self.reports
            for asset, weight in sorted(r.weights.items())
        ]
        return pd.DataFrame(rows, columns=["date", "asset", "weight"])

    def trades_frame(self) -> pd.DataFrame:
        rows = [
            {
                "date": r.date.strftime("%Y-%m-%d"),
                "asset": t.asset,
                "price": t.price,
                "notional": t.notional,
                "fee_rate": t.fee_rate,
                "fee": t.fee,
                "spread_fraction": t.spread_fraction,
                "spread_cost": t.spread_cost,
            }
            for r in self.reports
            for t in r.trade_costs
        ]
        columns = ["date", "asset", "price", "notional", "fee_rate", "fee", "spread_fraction", "spread_cost"]
        return pd.DataFrame(rows, columns=columns)

    def series_frame(self) -> pd.DataFrame:
        frame = self.series.reset_index()
        frame["date"] = frame["date"].dt.strftime("%Y-%m-%d")
        return frame


# ---------------------------------------------------------------------------
# リバランス
# ---------------------------------------------------------------------------


def _prices_at(
    dataset: MarketDataset, assets: Sequence[str], date: pd.Timestamp
) -> Dict[str, float]:
    prices = {}
    for asset in assets:
        try:
            prices[asset] = observation_at(dataset, asset, date).price
        except MissingObservationError as e:
            raise SimulationError(str(e), date=date, asset=asset) from e
    return prices


def _price_trades(
    assets: Sequence[str],
    prices: Mapping[str, float],
    current: Mapping[str, float],
    target_weights: Mapping[str, float],
    investable: float,
    pre_value: float,
    date: pd.Timestamp,
    spread_model: Optional[SpreadModel],
    fee_schedule: Optional[FeeSchedule],
    spread_share: float,
) -> List[TradeRecord]:
    """目標金額との差を売買金額として手数料・スプレッドを見積もる"""
    threshold = MIN_TRADE_FRACTION * max(investable, pre_value)
    records: List[TradeRecord] = []
    for asset in assets:
        notional = abs(target_weights[asset] * investable - current[asset])
        if notional <= threshold:
            continue
        try:
            spread = spread_model.spread_fraction(asset, date, notional) if spread_model else 0.0
        except (MissingObservationError, SpreadScalingError) as e:
            raise SimulationError(str(e), date=date, asset=asset) from e
        if fee_schedule is not None:
            cost = trade_cost(fee_schedule, spread, notional, spread_share)
            rate, fee, spread_cost = fee_rate(fee_schedule, notional), cost.fee, cost.spread_cost
        else:
            rate, fee, spread_cost = 0.0, 0.0, spread_share * spread * notional
        records.append(
            TradeRecord(
                asset=asset,
                price=prices[asset],
                notional=notional,
                fee_rate=rate,
                fee=fee,
                spread_fraction=spread,
                spread_cost=spread_cost,
            )
        )
    return records


def _execute(
    portfolio: Portfolio,
    dataset: MarketDataset,
    old_weights: Mapping[str, float],
    new_state: IndexState,
    date: pd.Timestamp,
    flow: float,
    spread_model: Optional[SpreadModel],
    fee_schedule: Optional[FeeSchedule],
    spread_share: float,
    reconstituted: bool,
) -> Tuple[Portfolio, RebalanceReport]:
    assets = sorted(set(portfolio.holdings) | set(new_state.constituents) | set(old_weights))
    prices = _prices_at(dataset, assets, date)

    # (1) 時価評価
    current = {a: portfolio.holdings.get(a, 0.0) * prices[a] for a in assets}
    pre_value = math.fsum(current.values()) + portfolio.cash

    # (2) 資金フロー
    target_weights = {a: new_state.weights.get(a, 0.0) for a in assets}
    investable = max(pre_value + flow, 0.0)

    # (3)-(5) 目標金額・売買金額・コスト
    records = _price_trades(
        assets, prices, current, target_weights, investable, pre_value,
        date, spread_model, fee_schedule, spread_share,
    )
    fees = math.fsum(r.fee for r in records)
    spread_costs = math.fsum(r.spread_cost for r in records)

    # 出金は清算価値（売却コスト控除後）で打ち切り
    clamped = pre_value + flow - fees - spread_costs < -MIN_TRADE_FRACTION * max(pre_value, 1.0)
    if clamped:
        target_weights = {a: 0.0 for a in assets}
        records = _price_trades(
            assets, prices, current, target_weights, 0.0, pre_value,
            date, spread_model, fee_schedule, spread_share,
        )
        fees = math.fsum(r.fee for r in records)
        spread_costs = math.fsum(r.spread_cost for r in records)
        deposit = -max(0.0, pre_value - fees - spread_costs)
        logger.warning(
            f"{date:%Y-%m-%d}: 出金 {-flow:,.2f} が清算価値 {-deposit:,.2f} を超えるため全額清算します"
        )
    else:
        deposit = flow
    net = pre_value + deposit - fees - spread_costs
    if net < -MIN_TRADE_FRACTION * max(pre_value, 1.0):
        raise SimulationError(f"取引コスト {fees + spread_costs:,.2f} が投資可能額を超えています", date=date)
    net = max(net, 0.0)

    # (6) コスト控除後の価値に対して目標を1回だけ再計算
    holdings = {
        a: target_weights[a] * net / prices[a] for a in assets if target_weights[a] > 0
    }
    invested = math.fsum(units * prices[a] for a, units in holdings.items())
    cash = max(0.0, net - invested)
    executed = {a: holdings.get(a, 0.0) * prices[a] - current[a] for a in assets}
    deltas = {
        a: new_state.weights.get(a, 0.0) - old_weights.get(a, 0.0)
        for a in sorted(set(new_state.constituents) | set(old_weights))
    }

    updated = Portfolio(
        holdings=holdings,
        cash=cash,
        cumulative_fees=portfolio.cumulative_fees + fees,
        cumulative_spread_costs=portfolio.cumulative_spread_costs + spread_costs,
    )
    report = RebalanceReport(
        date=date,
        pre_value=pre_value,
        post_value=invested + cash,
        deposit=deposit,
        requested_flow=flow,
        withdrawal_clamped=clamped,
        reconstituted=reconstituted,
        weights=dict(new_state.weights),
        deltas=deltas,
        trades=executed,
        trade_costs=tuple(records),
        fees=fees,
        spread_costs=spread_costs,
        cash=cash,
    )
    logger.debug(
        f"{date:%Y-%m-%d} リバランス: 価値 {pre_value:,.2f} → {report.post_value:,.2f}, "
        f"入出金 {deposit:,.2f}, 手数料 {fees:,.2f}, スプレッド {spread_costs:,.2f}, "
        f"回転率 {report.turnover_one_sided:.2%}"
    )
    return updated, report


def initialize(
    dataset: MarketDataset,
    index_state: IndexState,
    initial_capital: float,
    date: DateLike,
    spread_model: Optional[SpreadModel] = None,
    fee_schedule: Optional[FeeSchedule] = None,
    spread_share: float = DEFAULT_SPREAD_SHARE,
) -> Portfolio:
    """
    初期資本を指数ウェイトで構成銘柄に配分

    spread_model / fee_schedule が None の場合はその費用を0とする。
    """
    if not initial_capital > 0:
        raise ValueError(f"初期資本は正の値である必要があります: {initial_capital}")
    portfolio, _ = _execute(
        Portfolio(),
        dataset,
        {},
        index_state,
        to_date(date),
        initial_capital,
        spread_model,
        fee_schedule,
        spread_share,
        reconstituted=True,
    )
    return portfolio


def rebalance_step(
    portfolio: Portfolio,
    dataset: MarketDataset,
    old_state: IndexState,
    new_state: IndexState,
    date: DateLike,
    flow: float,
    spread_model: Optional[SpreadModel] = None,
    fee_schedule: Optional[FeeSchedule] = None,
    spread_share: float = DEFAULT_SPREAD_SHARE,
) -> Tuple[Portfolio, RebalanceReport]:
    """
    1回のリバランス

    時価評価 → 資金フロー加算 → 新ウェイトでの目標金額 → 売買とコスト →
    コスト控除後の価値で目標を再計算。除外銘柄は全量売却、新規銘柄はゼロから購入。
    """
    date = to_date(date)
    return _execute(
        portfolio,
        dataset,
        old_state.weights,
        new_state,
        date,
        flow,
        spread_model,
        fee_schedule,
        spread_share,
        reconstituted=set(new_state.constituents) != set(old_state.constituents),
    )


# ---------------------------------------------------------------------------
# バックテスト
# ---------------------------------------------------------------------------


def build_index_path(
    dataset: MarketDataset, config: BacktestConfig, dates: Sequence[pd.Timestamp]
) -> IndexPath:
    """初回と四半期は再構成、それ以外の月はウェイト更新"""
    states: List[IndexState] = []
    selections: List[Tuple[pd.Timestamp, SelectionResult]] = []
    flags: List[bool] = []
    for i, date in enumerate(dates):
        try:
            if i == 0 or is_reconstitution_date(date, config.reconstitution_months):
                state, selection = reconstitute(
                    dataset,
                    date,
                    candidate_ks=config.candidate_ks,
                    previous_state=states[-1] if states else None,
                    base_level=config.base_level,
                    window_months=config.selection_window_months,
                    max_constituents=config.max_constituents,
                )
                selections.append((date, selection))
                flags.append(True)
            else:
                state = reweight(states[-1], dataset, date)
                flags.append(False)
        except (SelectionError, MissingObservationError, KeyError, ValueError) as e:
            raise SimulationError(str(e), date=date) from e
        states.append(state)
    return IndexPath(
        dates=tuple(dates),
        states=tuple(states),
        selections=tuple(selections),
        reconstituted=tuple(flags),
    )


def _flow_schedule(
    dataset: MarketDataset, config: BacktestConfig, dates: Sequence[pd.Timestamp]
) -> FlowSchedule:
    if config.flows_enabled:
        try:
            return generate_flows(dataset.attention, dates, config.flow_params)
        except ValueError as e:
            raise SimulationError(str(e)) from e
    entries = ((dates[0], config.initial_capital),) + tuple((d, 0.0) for d in dates[1:])
    return FlowSchedule(entries=entries, initial_capital=config.initial_capital)


def _backtest_dates(dataset: MarketDataset, config: BacktestConfig) -> List[pd.Timestamp]:
    dates = rebalance_dates(dataset, config.start, config.end)
    if not dates:
        raise SimulationError(
            f"{config.start:%Y-%m-%d} - {config.end:%Y-%m-%d} にリバランス日がありません"
        )
    return dates


def _step_values(
    calendar: pd.DatetimeIndex, dates: Sequence[pd.Timestamp], values: Sequence[Any]
) -> List[Any]:
    """各日付にその日以前で最新のリバランス日の値を割り当てる"""
    boundaries = pd.DatetimeIndex(dates)
    positions = boundaries.searchsorted(calendar, side="right") - 1
    return [values[p] for p in positions]


def _daily_series(
    dataset: MarketDataset,
    config: BacktestConfig,
    path: IndexPath,
    portfolios: Sequence[Portfolio],
    reports: Sequence[RebalanceReport],
) -> pd.DataFrame:
    dates = list(path.dates)
    calendar = pd.DatetimeIndex(dataset.prices.index, name="date")
    calendar = calendar[(calendar >= dates[0]) & (calendar <= config.end)]
    filled = dataset.filled_prices.reindex(calendar)

    levels = index_series(dataset, path.states, calendar)

    etf_values = np.empty(len(calendar))
    portfolio_by_day = _step_values(calendar, dates, portfolios)
    for i, (day, portfolio) in enumerate(zip(calendar, portfolio_by_day)):
        row = filled.loc[day]
        total = [portfolio.cash]
        for asset, units in portfolio.holdings.items():
            price = row[asset]
            if pd.isna(price):
                raise SimulationError("保有銘柄の価格がありません", date=day, asset=asset)
            total.append(units * price)
        etf_values[i] = math.fsum(total)

    # 資金フローで膨らませた指数複製とベンチマーク（フロー分をその日の価格で購入）
    benchmark = config.benchmark_asset
    if benchmark not in filled.columns:
        raise SimulationError("ベンチマーク銘柄のデータがありません", asset=benchmark)
    replication_units: List[float] = []
    benchmark_units: List[float] = []
    units_index = 0.0
    units_benchmark = 0.0
    for report in reports:
        level = levels.loc[report.date]
        price = filled.loc[report.date, benchmark]
        if pd.isna(price):
            raise SimulationError("ベンチマーク価格がありません", date=report.date, asset=benchmark)
        units_index += report.deposit / level
        units_benchmark += report.deposit / price
        replication_units.append(units_index)
        benchmark_units.append(units_benchmark)

    replication = np.array(_step_values(calendar, dates, replication_units)) * levels.to_numpy()
    benchmark_values = np.array(_step_values(calendar, dates, benchmark_units)) * filled[benchmark].to_numpy()
    deposits = pd.Series(0.0, index=calendar)
    for report in reports:
        deposits.loc[report.date] = report.deposit

    return pd.DataFrame(
        {
            "etf_value": etf_values,
            "index_value": levels.to_numpy(),
            "replication_value": replication,
            "benchmark_value": benchmark_values,
            "deposit": deposits.to_numpy(),
            "cost_gap_units": (replication - etf_values) / levels.to_numpy(),
        },
        index=calendar,
    )


def _simulate(
    dataset: MarketDataset,
    config: BacktestConfig,
    path: IndexPath,
    flows: FlowSchedule,
    scaling_exponent: Optional[float],
) -> SimulationResult:
    spread_model: Optional[SpreadModel] = None
    fee_schedule: Optional[FeeSchedule] = None
    if config.costs_enabled:
        assert config.spread_curve is not None
        fee_schedule = config.fee_schedule
        try:
            spread_model = VolumeScaledSpreadModel(
                config.spread_curve,
                dataset,
                scaling_exponent if scaling_exponent is not None else config.scaling_exponents[0],
                window_days=config.reference_window_days,
            )
        except (MissingObservationError, SpreadScalingError) as e:
            raise SimulationError(str(e), asset=config.spread_curve.asset) from e

    portfolio = Portfolio()
    portfolios: List[Portfolio] = []
    reports: List[RebalanceReport] = []
    old_weights: Mapping[str, float] = {}
    for i, (date, state) in enumerate(zip(path.dates, path.states)):
        flow = flows.initial_capital if i == 0 else flows.flow_at(date)
        portfolio, report = _execute(
            portfolio,
            dataset,
            old_weights,
            state,
            date,
            flow,
            spread_model,
            fee_schedule,
            config.spread_share,
            reconstituted=path.reconstituted[i],
        )
        portfolios.append(portfolio)
        reports.append(report)
        old_weights = state.weights

    series = _daily_series(dataset, config, path, portfolios, reports)
    label = f"a={scaling_exponent:g}" if scaling_exponent is not None else "コストなし"
    logger.info(
        f"バックテスト完了 ({label}): リバランス {len(reports)}回, "
        f"最終価値 {series['etf_value'].iloc[-1]:,.2f}, "
        f"手数料合計 {portfolio.cumulative_fees:,.2f}, スプレッド合計 {portfolio.cumulative_spread_costs:,.2f}"
    )
    return SimulationResult(
        reports=tuple(reports),
        series=series,
        flows=flows,
        index_path=path,
        scaling_exponent=scaling_exponent,
        benchmark_asset=config.benchmark_asset,
    )


def run_backtest(
    dataset: MarketDataset,
    config: BacktestConfig,
    scaling_exponent: Optional[float] = None,
) -> SimulationResult:
    """
    バックテストの実行

    リバランス日を導出し、指数状態（再構成/ウェイト更新）と資金フローを用意して
    初期配分とリバランスを連鎖させる。scaling_exponent を省略すると設定の最初の値を使う。
    """
    dates = _backtest_dates(dataset, config)
    path = build_index_path(dataset, config, dates)
    flows = _flow_schedule(dataset, config, dates)
    if config.costs_enabled and scaling_exponent is None:
        scaling_exponent = config.scaling_exponents[0]
    return _simulate(dataset, config, path, flows, scaling_exponent if config.costs_enabled else None)


def run_backtests(dataset: MarketDataset, config: BacktestConfig) -> Dict[float, SimulationResult]:
    """スケーリング指数ごとのバックテスト（指数状態と資金フローは共通）"""
    dates = _backtest_dates(dataset, config)
    path = build_index_path(dataset, config, dates)
    flows = _flow_schedule(dataset, config, dates)
    results: Dict[float, SimulationResult] = {}
    for a in config.scaling_exponents:
        results[a] = _simulate(dataset, config, path, flows, a if config.costs_enabled else None)
    return results


# ---------------------------------------------------------------------------
# パフォーマンス集計
# ---------------------------------------------------------------------------


def sharpe_ratio(log_returns: Sequence[float]) -> Optional[float]:
    """
    年率シャープレシオ mean/std·√365（無リスク金利0）

    標準偏差が実質0の場合は定義できないため None を返す。
    """
    returns = np.asarray(log_returns, dtype=float)
    if len(returns) < 2:
        raise ValueError(f"シャープレシオには2件以上のリターンが必要です（{len(returns)}件）")
    std = float(np.std(returns, ddof=1))
    if std < ZERO_STD_THRESHOLD:
        return None
    return float(np.mean(returns)) / std * math.sqrt(TRADING_DAYS_PER_YEAR)


def flow_adjusted_log_returns(values: pd.Series, deposits: pd.Series) -> pd.Series:
    """その日の入出金を除いた日次対数リターン"""
    previous = values.shift(1)
    returns = np.log((values - deposits) / previous)
    return returns.iloc[1:]


def _stats(values: Sequence[float]) -> Dict[str, Optional[float]]:
    clean = [v for v in values if not math.isnan(v)]
    if not clean:
        return {"mean": None, "min": None, "max": None, "median": None}
    return {
        "mean": float(np.mean(clean)),
        "min": float(np.min(clean)),
        "max": float(np.max(clean)),
        "median": float(np.median(clean)),
    }


def delta_ranking(result: SimulationResult) -> List[Tuple[str, float]]:
    """初回配分以降の Σ_t|Δ| による銘柄ランキング（降順、同値はティッカー順）"""
    totals: Dict[str, float] = {}
    for report in result.reports[1:]:
        for asset, delta in report.deltas.items():
            totals[asset] = totals.get(asset, 0.0) + abs(delta)
    return sorted(totals.items(), key=lambda item: (-item[1], item[0]))


def opposite_sign_count(result: SimulationResult, first: str = "BTC", second: str = "ETH") -> int:
    """2銘柄のΔが逆符号となったリバランス回数"""
    return sum(
        1
        for r in result.reports[1:]
        if r.deltas.get(first, 0.0) * r.deltas.get(second, 0.0) < 0
    )


def performance_summary(
    result: SimulationResult, benchmark_asset: Optional[str] = None
) -> Dict[str, Any]:
    """
    パフォーマンス集計

    ETF（フロー調整後）、指数、ベンチマーク価格のシャープレシオ、片側回転率の統計、
    コスト統計（Δ加重スプレッドの中央値など）、摩擦なし複製との比例性を返す。
    """
    if not result.reports:
        raise ValueError("バックテスト結果が空です")
    benchmark_asset = benchmark_asset or result.benchmark_asset
    if benchmark_asset != result.benchmark_asset:
        raise ValueError(f"ベンチマーク {benchmark_asset} はこの結果に含まれていません")
    series = result.series

    etf_returns = flow_adjusted_log_returns(series["etf_value"], series["deposit"])
    index_returns = np.log(series["index_value"] / series["index_value"].shift(1)).iloc[1:]
    # フロー分の購入を除くとベンチマークの価格リターンそのもの
    benchmark_returns = flow_adjusted_log_returns(series["benchmark_value"], series["deposit"])

    turnovers = [r.turnover_one_sided for r in result.reports[1:]]
    ratio = series["etf_value"] / series["replication_value"]
    deviation = float((ratio / ratio.iloc[0] - 1.0).abs().max())
    gap = series["cost_gap_units"].to_numpy()
    units_scale = float((series["replication_value"] / series["index_value"]).abs().max())
    gap_tolerance = PROPORTIONALITY_TOLERANCE * units_scale

    ranking = delta_ranking(result)
    summary = {
        "scaling_exponent": result.scaling_exponent,
        "benchmark_asset": benchmark_asset,
        "n_rebalances": len(result.reports),
        "start": series.index[0].strftime("%Y-%m-%d"),
        "end": series.index[-1].strftime("%Y-%m-%d"),
        "sharpe": {
            "etf": sharpe_ratio(etf_returns.to_numpy()),
            "index": sharpe_ratio(index_returns.to_numpy()),
            "benchmark": sharpe_ratio(benchmark_returns.to_numpy()),
        },
        "turnover_one_sided": _stats(turnovers),
        "costs": {
            "total_fees": math.fsum(r.fees for r in result.reports),
            "total_spread_costs": math.fsum(r.spread_costs for r in result.reports),
            "weighted_fee_rate": _stats([r.weighted_fee_rate for r in result.reports[1:]]),
            "weighted_spread": _stats([r.weighted_spread for r in result.reports[1:]]),
        },
        "values": {
            "etf_final": float(series["etf_value"].iloc[-1]),
            "replication_final": float(series["replication_value"].iloc[-1]),
            "benchmark_final": float(series["benchmark_value"].iloc[-1]),
            "index_final": float(series["index_value"].iloc[-1]),
            "total_deposits": math.fsum(r.deposit for r in result.reports),
        },
        "cost_gap_units_final": float(gap[-1]),
        "cost_gap_non_decreasing": bool(np.all(np.diff(gap) >= -gap_tolerance)),
        "frictionless_proportional": deviation <= PROPORTIONALITY_TOLERANCE,
        "max_replication_deviation": deviation,
        "withdrawals_clamped": sum(r.withdrawal_clamped for r in result.reports),
        "delta_ranking": [{"asset": a, "abs_delta_sum": v} for a, v in ranking],
        "btc_eth_opposite_sign_count": opposite_sign_count(result),
    }
    return summary
