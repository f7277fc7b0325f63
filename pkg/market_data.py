"""
Market Data Module for CRIX ETF
市場データ取り込み - 価格・時価総額・24h出来高・約定データ・注目度指数の読み込みと検証

このモジュールは、crix-etfプロジェクトのデータ層を提供します：
- CSVの読み込みと行単位の検証（ファイル・行・列を特定したエラー）
- 銘柄×日付で整列したデータセット
- 鮮度ウィンドウ付きの観測値参照
- テイカー注文単位の約定グループ化
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

QUOTE_CURRENCY = "USDT"
DEFAULT_STALENESS_DAYS = 3

PRICE_COLUMNS = ["date", "asset", "price", "market_cap"]
VOLUME_COLUMNS = ["date", "asset", "volume_24h"]
ATTENTION_COLUMNS = ["date", "score"]
TRADE_COLUMNS = ["timestamp_ms", "asset", "taker_order_id", "price", "quantity"]

DateLike = Union[str, pd.Timestamp, "np.datetime64"]
Source = Union[str, Path, pd.DataFrame]


class DataValidationError(ValueError):
    """入力データの検証エラー（ファイル・行・列を保持）"""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[str] = None,
    ):
        self.path = path
        self.line = line
        self.column = column
        location = ":".join(str(part) for part in (path, line) if part is not None)
        if column is not None:
            location = f"{location} 列 '{column}'" if location else f"列 '{column}'"
        super().__init__(f"{location}: {message}" if location else message)


class MissingObservationError(LookupError):
    """鮮度ウィンドウ内に観測値がない"""


def to_date(value: DateLike) -> pd.Timestamp:
    """日付表現を正規化されたTimestampに変換（UTCの暦日）"""
    ts = pd.Timestamp(value)
    if ts.tzinfo is not None:
        ts = ts.tz_convert("UTC").tz_localize(None)
    return ts.normalize()


@dataclass(frozen=True)
class DailyObservation:
    """ある銘柄のある日の観測値"""

    date: pd.Timestamp
    price: float
    market_cap: float
    volume_24h: Optional[float] = None


@dataclass(frozen=True)
class TradeFill:
    """約定1件（テイカー注文の一部）"""

    timestamp_ms: int
    asset: str
    taker_order_id: str
    price: float
    quantity: float


@dataclass(frozen=True, eq=False)
class AttentionSeries:
    """注目度指数（検索関心度 0〜100）"""

    scores: pd.Series

    def __post_init__(self) -> None:
        index = self.scores.index
        if len(index) > 1 and not (index[1:] > index[:-1]).all():
            raise ValueError("注目度指数の日付は狭義単調増加である必要があります")
        if ((self.scores < 0) | (self.scores > 100)).any():
            raise ValueError("注目度スコアは0〜100の範囲である必要があります")

    @property
    def first_date(self) -> pd.Timestamp:
        return self.scores.index[0]

    @property
    def last_date(self) -> pd.Timestamp:
        return self.scores.index[-1]

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True, eq=False)
class MarketDataset:
    """
    銘柄×日付で整列した市場データセット

    prices / market_caps / volumes は index=日付（calendar）、columns=銘柄 のワイド形式で、
    観測がないセルは NaN。読み込み後は読み取り専用として扱う。
    """

    prices: pd.DataFrame
    market_caps: pd.DataFrame
    volumes: pd.DataFrame
    attention: AttentionSeries
    trades: Tuple[TradeFill, ...] = ()
    gap_dates: Dict[str, Tuple[pd.Timestamp, ...]] = field(default_factory=dict)
    quote_currency: str = QUOTE_CURRENCY
    staleness_days: int = DEFAULT_STALENESS_DAYS

    @property
    def assets(self) -> List[str]:
        return list(self.prices.columns)

    @property
    def calendar(self) -> List[pd.Timestamp]:
        return list(self.prices.index)

    @cached_property
    def filled_prices(self) -> pd.DataFrame:
        """鮮度ウィンドウ内で前方補完した価格（日次評価の高速化用）"""
        return _fill_within_window(self.prices, self.staleness_days)

    def equals(self, other: "MarketDataset") -> bool:
        """内容が同一かを判定"""
        return (
            self.prices.equals(other.prices)
            and self.market_caps.equals(other.market_caps)
            and self.volumes.equals(other.volumes)
            and self.attention.scores.equals(other.attention.scores)
            and self.trades == other.trades
            and self.quote_currency == other.quote_currency
        )


def _fill_within_window(frame: pd.DataFrame, window_days: int) -> pd.DataFrame:
    if frame.empty:
        return frame.copy()
    daily_index = pd.date_range(frame.index[0], frame.index[-1], freq="D")
    return frame.reindex(daily_index).ffill(limit=window_days).reindex(frame.index)


# ---------------------------------------------------------------------------
# CSV 読み込み
# ---------------------------------------------------------------------------


def _read_table(source: Source, required: List[str]) -> Tuple[pd.DataFrame, str]:
    """CSVを文字列として読み込み、必須列を確認"""
    if isinstance(source, pd.DataFrame):
        df, label = source.copy(), "<memory>"
        for column in df.columns:
            if pd.api.types.is_datetime64_any_dtype(df[column]):
                df[column] = df[column].dt.strftime("%Y-%m-%d")
        df = df.astype(str)
    else:
        label = str(source)
        try:
            df = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
        except pd.errors.EmptyDataError:
            raise DataValidationError("ヘッダー行がありません", path=label, line=1)
        except pd.errors.ParserError as e:
            raise DataValidationError(f"CSVの解析に失敗しました: {e}", path=label)

    df.columns = [str(c).strip() for c in df.columns]
    for column in required:
        if column not in df.columns:
            raise DataValidationError("必須列がありません", path=label, line=1, column=column)
    return df.reset_index(drop=True), label


def _line_of(position: int) -> int:
    # ヘッダー行が1行目、データは2行目から
    return int(position) + 2


def _raise_first(mask: pd.Series, message: str, label: str, column: str) -> None:
    if mask.any():
        position = int(np.flatnonzero(mask.to_numpy())[0])
        raise DataValidationError(message, path=label, line=_line_of(position), column=column)


def _parse_dates(df: pd.DataFrame, column: str, label: str) -> pd.Series:
    parsed = pd.to_datetime(df[column].str.strip(), format="%Y-%m-%d", errors="coerce")
    _raise_first(parsed.isna(), "ISO-8601形式の日付ではありません", label, column)
    return parsed


def _parse_decimal(df: pd.DataFrame, column: str, label: str) -> pd.Series:
    parsed = pd.to_numeric(df[column].str.strip(), errors="coerce").astype(float)
    _raise_first(~np.isfinite(parsed), "数値として解釈できません", label, column)
    return parsed


def _parse_symbol(df: pd.DataFrame, column: str, label: str) -> pd.Series:
    symbols = df[column].str.strip()
    _raise_first(symbols == "", "値が空です", label, column)
    return symbols


def _check_quote(df: pd.DataFrame, label: str, quote_currency: str) -> None:
    if "quote" not in df.columns:
        return
    quotes = df["quote"].str.strip().str.upper()
    _raise_first(
        quotes != quote_currency,
        f"建て通貨が混在しています（{quote_currency} のみ対応）",
        label,
        "quote",
    )


def _check_duplicates(keys: pd.DataFrame, label: str, column: str) -> None:
    _raise_first(keys.duplicated(keep="first"), "(銘柄, 日付) が重複しています", label, column)


def _parse_prices(source: Source, quote_currency: str) -> pd.DataFrame:
    df, label = _read_table(source, PRICE_COLUMNS)
    _check_quote(df, label, quote_currency)
    parsed = pd.DataFrame(
        {
            "date": _parse_dates(df, "date", label),
            "asset": _parse_symbol(df, "asset", label),
            "price": _parse_decimal(df, "price", label),
            "market_cap": _parse_decimal(df, "market_cap", label),
        }
    )
    _raise_first(parsed["price"] <= 0, "価格は正の値である必要があります", label, "price")
    _raise_first(parsed["market_cap"] < 0, "時価総額は0以上である必要があります", label, "market_cap")
    _check_duplicates(parsed[["asset", "date"]], label, "date")
    return parsed


def _parse_volumes(source: Source, quote_currency: str) -> pd.DataFrame:
    df, label = _read_table(source, VOLUME_COLUMNS)
    _check_quote(df, label, quote_currency)
    parsed = pd.DataFrame(
        {
            "date": _parse_dates(df, "date", label),
            "asset": _parse_symbol(df, "asset", label),
            "volume_24h": _parse_decimal(df, "volume_24h", label),
        }
    )
    _raise_first(parsed["volume_24h"] < 0, "24h出来高は0以上である必要があります", label, "volume_24h")
    _check_duplicates(parsed[["asset", "date"]], label, "date")
    return parsed


def _parse_attention(source: Source) -> AttentionSeries:
    df, label = _read_table(source, ATTENTION_COLUMNS)
    dates = _parse_dates(df, "date", label)
    scores = _parse_decimal(df, "score", label)
    _raise_first((scores < 0) | (scores > 100), "スコアは0〜100の範囲である必要があります", label, "score")
    not_increasing = dates.diff() <= pd.Timedelta(0)
    _raise_first(not_increasing.fillna(False), "日付が狭義単調増加ではありません", label, "date")
    series = pd.Series(scores.to_numpy(), index=pd.DatetimeIndex(dates, name="date"), name="score")
    return AttentionSeries(series)


def _parse_trades(source: Source) -> Tuple[TradeFill, ...]:
    df, label = _read_table(source, TRADE_COLUMNS)
    timestamps = _parse_decimal(df, "timestamp_ms", label)
    _raise_first(timestamps != np.floor(timestamps), "ミリ秒のエポック整数ではありません", label, "timestamp_ms")
    assets = _parse_symbol(df, "asset", label)
    order_ids = _parse_symbol(df, "taker_order_id", label)
    prices = _parse_decimal(df, "price", label)
    quantities = _parse_decimal(df, "quantity", label)
    _raise_first(prices <= 0, "約定価格は正の値である必要があります", label, "price")
    _raise_first(quantities <= 0, "約定数量は正の値である必要があります", label, "quantity")
    _raise_first(timestamps.diff() < 0, "タイムスタンプが昇順ではありません", label, "timestamp_ms")
    return tuple(
        TradeFill(int(ts), asset, order_id, float(price), float(qty))
        for ts, asset, order_id, price, qty in zip(timestamps, assets, order_ids, prices, quantities)
    )


def build_dataset(
    prices: Source,
    volumes: Source,
    attention: Source,
    trades: Optional[Source] = None,
    quote_currency: str = QUOTE_CURRENCY,
    staleness_days: int = DEFAULT_STALENESS_DAYS,
) -> MarketDataset:
    """
    CSVパスまたは長形式のDataFrameから検証済みのデータセットを構築

    Args:
        prices: date,asset,price,market_cap
        volumes: date,asset,volume_24h
        attention: date,score
        trades: timestamp_ms,asset,taker_order_id,price,quantity（任意）
        quote_currency: 建て通貨
        staleness_days: 欠損時に遡る最大日数

    Returns:
        MarketDataset: 日付整列済みデータセット
    """
    if staleness_days < 0:
        raise ValueError("staleness_days は0以上である必要があります")

    price_rows = _parse_prices(prices, quote_currency)
    volume_rows = _parse_volumes(volumes, quote_currency)
    attention_series = _parse_attention(attention)
    fills = _parse_trades(trades) if trades is not None else ()

    assets = sorted(set(price_rows["asset"]) | set(volume_rows["asset"]))
    calendar = pd.DatetimeIndex(
        sorted(set(price_rows["date"]) | set(volume_rows["date"])), name="date"
    )

    def _wide(rows: pd.DataFrame, value: str) -> pd.DataFrame:
        frame = rows.pivot(index="date", columns="asset", values=value)
        frame = frame.reindex(index=calendar, columns=assets).astype(float)
        frame.index.name = "date"
        frame.columns.name = "asset"
        return frame

    price_frame = _wide(price_rows, "price")
    gap_dates = _flag_gaps(price_frame)

    dataset = MarketDataset(
        prices=price_frame,
        market_caps=_wide(price_rows, "market_cap"),
        volumes=_wide(volume_rows, "volume_24h"),
        attention=attention_series,
        trades=fills,
        gap_dates=gap_dates,
        quote_currency=quote_currency,
        staleness_days=staleness_days,
    )
    logger.info(
        f"データセット読み込み完了: 銘柄数 {len(assets)}, 日数 {len(calendar)}, 約定 {len(fills)}件"
    )
    return dataset


def load_dataset(
    price_csv_path: Union[str, Path],
    volume_csv_path: Union[str, Path],
    attention_csv_path: Union[str, Path],
    trades_csv_path: Optional[Union[str, Path]] = None,
    quote_currency: str = QUOTE_CURRENCY,
    staleness_days: int = DEFAULT_STALENESS_DAYS,
) -> MarketDataset:
    """CSVファイル群からデータセットを読み込む"""
    for path in (price_csv_path, volume_csv_path, attention_csv_path, trades_csv_path):
        if path is not None and not Path(path).exists():
            raise FileNotFoundError(f"入力ファイルが見つかりません: {path}")
    return build_dataset(
        Path(price_csv_path),
        Path(volume_csv_path),
        Path(attention_csv_path),
        Path(trades_csv_path) if trades_csv_path is not None else None,
        quote_currency=quote_currency,
        staleness_days=staleness_days,
    )


def load_trades(trades_csv_path: Union[str, Path]) -> Tuple[TradeFill, ...]:
    """約定CSVだけを読み込む（スプレッド推定用）"""
    if not Path(trades_csv_path).exists():
        raise FileNotFoundError(f"入力ファイルが見つかりません: {trades_csv_path}")
    fills = _parse_trades(Path(trades_csv_path))
    logger.info(f"約定データ読み込み完了: {len(fills)}件")
    return fills


def _flag_gaps(prices: pd.DataFrame) -> Dict[str, Tuple[pd.Timestamp, ...]]:
    """上場期間中（初回〜最終観測）に価格がない日付を記録"""
    gaps: Dict[str, Tuple[pd.Timestamp, ...]] = {}
    for asset in prices.columns:
        column = prices[asset]
        valid = column.dropna()
        if valid.empty:
            continue
        listed = column.loc[valid.index[0] : valid.index[-1]]
        missing = tuple(listed.index[listed.isna()])
        if missing:
            gaps[asset] = missing
            logger.warning(f"{asset}: 上場期間中に価格の欠損が {len(missing)} 日あります")
    return gaps


def save_dataset(dataset: MarketDataset, directory: Union[str, Path]) -> Dict[str, Path]:
    """データセットを入力と同じCSV形式で書き出す"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def _long(frames: Dict[str, pd.DataFrame]) -> pd.DataFrame:
        stacked = pd.concat(
            {name: frame.stack(future_stack=True) for name, frame in frames.items()}, axis=1
        )
        stacked = stacked.dropna(subset=[next(iter(frames))]).reset_index()
        stacked["date"] = stacked["date"].dt.strftime("%Y-%m-%d")
        return stacked.sort_values(["date", "asset"], kind="mergesort")

    paths = {
        "prices": directory / "prices.csv",
        "volumes": directory / "volumes.csv",
        "attention": directory / "attention.csv",
        "trades": directory / "trades.csv",
    }
    prices = _long({"price": dataset.prices, "market_cap": dataset.market_caps})
    prices[PRICE_COLUMNS].to_csv(paths["prices"], index=False, lineterminator="\n")
    volumes = _long({"volume_24h": dataset.volumes})
    volumes[VOLUME_COLUMNS].to_csv(paths["volumes"], index=False, lineterminator="\n")

    attention = pd.DataFrame(
        {
            "date": dataset.attention.scores.index.strftime("%Y-%m-%d"),
            "score": dataset.attention.scores.to_numpy(),
        }
    )
    attention.to_csv(paths["attention"], index=False, lineterminator="\n")

    trades = pd.DataFrame(
        [
            (f.timestamp_ms, f.asset, f.taker_order_id, f.price, f.quantity)
            for f in dataset.trades
        ],
        columns=TRADE_COLUMNS,
    )
    trades.to_csv(paths["trades"], index=False, lineterminator="\n")
    return paths


# ---------------------------------------------------------------------------
# 参照
# ---------------------------------------------------------------------------


def _latest_valid(
    column: pd.Series, date: pd.Timestamp, window_days: int
) -> Optional[Tuple[pd.Timestamp, float]]:
    valid = column.loc[:date].dropna()
    if valid.empty:
        return None
    found = valid.index[-1]
    if (date - found).days > window_days:
        return None
    return found, float(valid.iloc[-1])


def _require_asset(dataset: MarketDataset, asset: str) -> None:
    if asset not in dataset.prices.columns:
        raise MissingObservationError(f"{asset}: データセットに存在しない銘柄です")


def observation_at(
    dataset: MarketDataset,
    asset: str,
    date: DateLike,
    staleness_days: Optional[int] = None,
) -> DailyObservation:
    """
    指定日の観測値を取得

    指定日に観測がない場合は、鮮度ウィンドウ（既定3日）以内の直近過去の観測を返す。
    指定日より後のデータは決して返さない。
    """
    _require_asset(dataset, asset)
    date = to_date(date)
    window = dataset.staleness_days if staleness_days is None else staleness_days

    found = _latest_valid(dataset.prices[asset], date, window)
    if found is None:
        raise MissingObservationError(
            f"{asset}: {date:%Y-%m-%d} から{window}日以内に価格の観測がありません"
        )
    found_date, price = found
    if found_date != date:
        logger.debug(f"{asset}: {date:%Y-%m-%d} の代わりに {found_date:%Y-%m-%d} の観測を使用")

    volume = _latest_valid(dataset.volumes[asset], date, window)
    return DailyObservation(
        date=found_date,
        price=price,
        market_cap=float(dataset.market_caps.at[found_date, asset]),
        volume_24h=volume[1] if volume is not None else None,
    )


def volume_at(
    dataset: MarketDataset,
    asset: str,
    date: DateLike,
    staleness_days: Optional[int] = None,
) -> float:
    """指定日の24h出来高（鮮度ウィンドウ付き）"""
    _require_asset(dataset, asset)
    date = to_date(date)
    window = dataset.staleness_days if staleness_days is None else staleness_days
    found = _latest_valid(dataset.volumes[asset], date, window)
    if found is None:
        raise MissingObservationError(
            f"{asset}: {date:%Y-%m-%d} から{window}日以内に24h出来高の観測がありません"
        )
    return found[1]


def fill_groups(trades: Tuple[TradeFill, ...]) -> Dict[Tuple[str, str], List[TradeFill]]:
    """約定を (銘柄, テイカー注文ID) ごとにグループ化（初出順）"""
    groups: Dict[Tuple[str, str], List[TradeFill]] = {}
    for fill in trades:
        groups.setdefault((fill.asset, fill.taker_order_id), []).append(fill)
    return groups


def rebalance_dates(
    dataset: MarketDataset, start: DateLike, end: DateLike
) -> List[pd.Timestamp]:
    """
    各暦月のリバランス日を導出

    月初日までに上場済みの銘柄がすべて揃う最初の日付。月の途中で上場した銘柄は
    判定に含めない。揃う日がない月はその月の最初の日付（欠損は鮮度ウィンドウで補う）。
    """
    start, end = to_date(start), to_date(end)
    prices = dataset.prices.loc[start:end]
    dates: List[pd.Timestamp] = []
    for _, month_prices in prices.groupby(prices.index.to_period("M")):
        priced = month_prices.notna().any()
        if not priced.any():
            continue
        listed_by_first_day = dataset.prices.loc[: month_prices.index[0]].notna().any()
        listed = month_prices.columns[priced & listed_by_first_day]
        complete = month_prices[listed].notna().all(axis=1)
        if complete.any():
            dates.append(complete.index[complete.to_numpy()][0])
        else:
            logger.warning(
                f"{month_prices.index[0]:%Y-%m}: 全銘柄の価格が揃う日がないため月初日を使用します"
            )
            dates.append(month_prices.index[0])
    return dates
