"""
共通テストフィクスチャ - 合成市場データの生成
"""

from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import pytest

from market_data import MarketDataset, build_dataset


def long_frames(
    prices: Mapping[str, Sequence[float]],
    caps: Mapping[str, Sequence[float]],
    start: str = "2020-01-01",
    volumes: Optional[Mapping[str, Sequence[float]]] = None,
):
    """銘柄→日次系列（NaN は観測なし）から長形式の価格・出来高表を作る"""
    n_days = len(next(iter(prices.values())))
    dates = pd.date_range(start, periods=n_days, freq="D")
    price_rows, volume_rows = [], []
    for asset, series in prices.items():
        for i, (date, price) in enumerate(zip(dates, series)):
            if np.isnan(price):
                continue
            price_rows.append((date, asset, float(price), float(caps[asset][i])))
            volume = volumes[asset][i] if volumes is not None else float(caps[asset][i]) * 0.05
            if not np.isnan(volume):
                volume_rows.append((date, asset, float(volume)))
    price_frame = pd.DataFrame(price_rows, columns=["date", "asset", "price", "market_cap"])
    volume_frame = pd.DataFrame(volume_rows, columns=["date", "asset", "volume_24h"])
    return price_frame, volume_frame


def flat_attention(start: str, end: str, score: float = 50.0) -> pd.DataFrame:
    dates = pd.date_range(start, end, freq="D")
    return pd.DataFrame({"date": dates, "score": score})


def make_market(
    prices: Mapping[str, Sequence[float]],
    caps: Mapping[str, Sequence[float]],
    start: str = "2020-01-01",
    volumes: Optional[Mapping[str, Sequence[float]]] = None,
    attention: Optional[pd.DataFrame] = None,
    trades: Optional[pd.DataFrame] = None,
    staleness_days: int = 3,
) -> MarketDataset:
    price_frame, volume_frame = long_frames(prices, caps, start, volumes)
    if attention is None:
        last = price_frame["date"].max() + pd.Timedelta(days=10)
        attention = flat_attention(start, last.strftime("%Y-%m-%d"))
    return build_dataset(
        price_frame, volume_frame, attention, trades, staleness_days=staleness_days
    )


def random_market(
    rng: np.random.Generator,
    n_assets: int = 4,
    n_days: int = 240,
    start: str = "2020-01-01",
    volatility: float = 0.04,
    attention: Optional[pd.DataFrame] = None,
) -> MarketDataset:
    """幾何ランダムウォークの価格と固定流通量による合成市場"""
    assets = [f"C{i:02d}" for i in range(n_assets)]
    prices: Dict[str, np.ndarray] = {}
    caps: Dict[str, np.ndarray] = {}
    for asset in assets:
        initial = float(rng.uniform(1.0, 1000.0))
        supply = float(rng.uniform(1e5, 1e7))
        path = initial * np.exp(np.cumsum(rng.normal(0.0, volatility, size=n_days)))
        prices[asset] = path
        caps[asset] = path * supply
    return make_market(prices, caps, start=start, attention=attention)


@pytest.fixture
def rng():
    return np.random.default_rng(20200701)


@pytest.fixture
def three_asset_market():
    """
    3銘柄・約9か月の市場（2020-01-01 から 274日）

    BTC が最大、ETH・XRP が続く。価格は決定的な周期変動。
    """
    n_days = 274
    t = np.arange(n_days)
    prices = {
        "BTC": 9000.0 * (1.0 + 0.2 * np.sin(t / 17.0)),
        "ETH": 200.0 * (1.0 + 0.3 * np.sin(t / 11.0 + 1.0)),
        "XRP": 0.25 * (1.0 + 0.25 * np.cos(t / 7.0)),
    }
    supplies = {"BTC": 18_000_000.0, "ETH": 110_000_000.0, "XRP": 40_000_000_000.0}
    caps = {a: prices[a] * supplies[a] for a in prices}
    return make_market(prices, caps, start="2020-01-01")
