#!/usr/bin/env python3
"""
サンプルデータ生成スクリプト
幾何ランダムウォークによる合成市場データ（価格・時価総額・24h出来高・注目度・約定）を生成
使用方法: python3 scripts/generate_sample_data.py [--out ./data] [--seed 7]
"""

import argparse
import os
import sys

import numpy as np
import pandas as pd

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from market_data import build_dataset, save_dataset  # noqa: E402

# 銘柄: (初期価格, 流通量, 日次ボラティリティ, 上場日)
ASSETS = {
    "BTC": (9_000.0, 18_400_000, 0.035, None),
    "ETH": (230.0, 111_000_000, 0.045, None),
    "XRP": (0.20, 44_000_000_000, 0.055, None),
    "BCH": (240.0, 18_400_000, 0.05, None),
    "LTC": (45.0, 65_000_000, 0.05, None),
    "BNB": (16.0, 155_000_000, 0.05, None),
    "ADA": (0.08, 31_000_000_000, 0.06, None),
    "XLM": (0.07, 20_000_000_000, 0.06, None),
    "LINK": (4.0, 350_000_000, 0.065, None),
    "DOT": (4.5, 850_000_000, 0.07, "2020-08-20"),
}


def generate_market(start: str, end: str, seed: int):
    """長形式の価格・出来高・注目度を生成"""
    rng = np.random.default_rng(seed)
    dates = pd.date_range(start, end, freq="D")
    common = rng.normal(0.001, 0.025, size=len(dates))

    price_rows, volume_rows = [], []
    for asset, (initial, supply, vol, listed) in ASSETS.items():
        idiosyncratic = rng.normal(0.0, vol, size=len(dates))
        prices = initial * np.exp(np.cumsum(common + idiosyncratic))
        turnover = 0.05 * np.exp(rng.normal(0.0, 0.3, size=len(dates)))
        for date, price, ratio in zip(dates, prices, turnover):
            if listed is not None and date < pd.Timestamp(listed):
                continue
            cap = price * supply
            price_rows.append((date, asset, price, cap))
            volume_rows.append((date, asset, cap * ratio))

    prices = pd.DataFrame(price_rows, columns=["date", "asset", "price", "market_cap"])
    volumes = pd.DataFrame(volume_rows, columns=["date", "asset", "volume_24h"])

    # 週次の注目度: BTC価格の水準に連動（0〜100に正規化）
    btc = prices[prices["asset"] == "BTC"].set_index("date")["price"]
    weekly = btc.resample("W-SUN").mean()
    level = np.log(weekly)
    scores = 5.0 + 95.0 * (level - level.min()) / (level.max() - level.min())
    attention = pd.DataFrame({"date": scores.index, "score": scores.round(1).to_numpy()})
    return prices, volumes, attention


def generate_trades(seed: int, n_orders: int = 3000) -> pd.DataFrame:
    """BTCのテイカー注文（複数約定）を生成。スプレッドは取引金額に線形"""
    rng = np.random.default_rng(seed + 1)
    rows = []
    timestamp = 1_622_505_600_000
    mid = 36_000.0
    for order in range(n_orders):
        notional = float(np.exp(rng.normal(8.0, 1.5)))
        n_fills = int(rng.integers(1, 6))
        spread = (1.5e-4 + 6.0e-9 * notional) * float(rng.uniform(0.2, 1.4))
        mid *= float(np.exp(rng.normal(0.0, 2e-4)))
        offsets = np.sort(rng.uniform(0.0, 1.0, size=n_fills))
        if n_fills > 1:
            offsets = (offsets - offsets.min()) / max(offsets.max() - offsets.min(), 1e-12)
        quantity = notional / mid / n_fills
        for offset in offsets:
            timestamp += int(rng.integers(1, 50))
            price = mid * (1.0 + spread * float(offset))
            rows.append((timestamp, "BTC", f"T{order:06d}", round(price, 2), round(quantity, 8)))
    return pd.DataFrame(rows, columns=["timestamp_ms", "asset", "taker_order_id", "price", "quantity"])


def main():
    parser = argparse.ArgumentParser(description="合成市場データの生成")
    parser.add_argument("--out", type=str, default="./data", help="出力ディレクトリ")
    parser.add_argument("--seed", type=int, default=7, help="乱数シード")
    parser.add_argument("--start", type=str, default="2020-03-01")
    parser.add_argument("--end", type=str, default="2021-06-30")
    args = parser.parse_args()

    print("📊 合成市場データを生成中...")
    prices, volumes, attention = generate_market(args.start, args.end, args.seed)
    trades = generate_trades(args.seed)
    dataset = build_dataset(prices, volumes, attention, trades)
    paths = save_dataset(dataset, args.out)
    for name, path in paths.items():
        print(f"  作成: {path}")
    print("✅ サンプルデータ生成完了")


if __name__ == "__main__":
    main()
