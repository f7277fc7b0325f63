"""
Cost Model Module for CRIX ETF
取引コスト - 段階制の手数料スケジュールとスプレッドを含む取引コスト
"""

import bisect
import logging
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Tuple

logger = logging.getLogger(__name__)

DEFAULT_SPREAD_SHARE = 0.5

# 閾値（USDT）と手数料率。Coinbase Pro 型のテイカー手数料
DEFAULT_FEE_TIERS: Tuple[Tuple[float, float], ...] = (
    (0.0, 0.005),
    (10_000.0, 0.0035),
    (50_000.0, 0.0025),
    (100_000.0, 0.002),
    (1_000_000.0, 0.0018),
    (10_000_000.0, 0.0015),
)


@dataclass(frozen=True)
class FeeTier:
    threshold: float
    rate: float


@dataclass(frozen=True)
class FeeSchedule:
    """
    段階制の手数料スケジュール

    閾値は0から始まり狭義単調増加、手数料率は (0,1) で単調非増加。
    """

    tiers: Tuple[FeeTier, ...]

    def __post_init__(self) -> None:
        if not self.tiers:
            raise ValueError("手数料スケジュールが空です")
        if self.tiers[0].threshold != 0:
            raise ValueError("最初の閾値は0である必要があります")
        for tier in self.tiers:
            if not 0 < tier.rate < 1:
                raise ValueError(f"手数料率は (0,1) の範囲である必要があります: {tier.rate}")
        for lower, upper in zip(self.tiers, self.tiers[1:]):
            if not upper.threshold > lower.threshold:
                raise ValueError("閾値は狭義単調増加である必要があります")
            if upper.rate > lower.rate:
                raise ValueError("手数料率は単調非増加である必要があります")

    @property
    def thresholds(self) -> Tuple[float, ...]:
        return tuple(t.threshold for t in self.tiers)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, float]]) -> "FeeSchedule":
        return cls(tuple(FeeTier(float(t), float(r)) for t, r in pairs))

    @classmethod
    def from_config(cls, entries: Iterable[Mapping[str, Any]]) -> "FeeSchedule":
        """設定ファイルの [{threshold, rate}, ...] から構築"""
        try:
            return cls.from_pairs((e["threshold"], e["rate"]) for e in entries)
        except KeyError as e:
            raise ValueError(f"手数料ティアに {e} がありません") from e

    @classmethod
    def default(cls) -> "FeeSchedule":
        return cls.from_pairs(DEFAULT_FEE_TIERS)


@dataclass(frozen=True)
class TradeCost:
    notional: float
    fee: float
    spread_cost: float

    @property
    def total(self) -> float:
        return self.fee + self.spread_cost


ZERO_COST = TradeCost(notional=0.0, fee=0.0, spread_cost=0.0)


def fee_rate(schedule: FeeSchedule, notional: float) -> float:
    """閾値が notional 以下となる最上位ティアの手数料率（閾値ちょうどは新ティア）"""
    if notional < 0:
        raise ValueError(f"取引金額は0以上である必要があります: {notional}")
    position = bisect.bisect_right(schedule.thresholds, notional) - 1
    return schedule.tiers[position].rate


def trade_cost(
    schedule: FeeSchedule,
    spread_fraction: float,
    notional: float,
    spread_share: float = DEFAULT_SPREAD_SHARE,
) -> TradeCost:
    """
    1取引のコスト

    fee = 手数料率 × 取引金額、spread_cost = spread_share × スプレッド比率 × 取引金額

    Args:
        schedule: 手数料スケジュール
        spread_fraction: スプレッド比率（0以上）
        notional: 取引金額の絶対値
        spread_share: スプレッドのうち取引が負担する割合（既定 0.5 = 半スプレッド）
    """
    if spread_fraction < 0:
        raise ValueError(f"スプレッド比率は0以上である必要があります: {spread_fraction}")
    if spread_share < 0:
        raise ValueError(f"spread_share は0以上である必要があります: {spread_share}")
    rate = fee_rate(schedule, notional)
    cost = TradeCost(
        notional=notional,
        fee=rate * notional,
        spread_cost=spread_share * spread_fraction * notional,
    )
    logger.debug(
        f"取引コスト: 金額 {notional:,.2f} 手数料率 {rate:.4%} "
        f"手数料 {cost.fee:,.4f} スプレッド {cost.spread_cost:,.4f}"
    )
    return cost
