"""
CRIX ETF Library
共通ライブラリ - 設定管理・ログ設定・出力ファイル書き出し

このライブラリは、crix-etfプロジェクトの共通機能を提供します：
- 設定管理（YAML、ドット区切りキー、--set による上書き）
- ログ設定
- 設定ハッシュ付きのCSV/JSON出力
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
import yaml


def setup_logging(config: "ConfigManager") -> logging.Logger:
    """
    統一ログ設定の初期化

    Args:
        config (ConfigManager): 設定

    Returns:
        logging.Logger: 設定済みのロガー
    """
    log_level = getattr(logging, str(config.get("logging.level", "INFO")).upper(), logging.INFO)
    log_format = config.get("logging.format", "%(asctime)s - %(levelname)s - %(message)s")
    log_file = config.get("logging.file")

    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        # ログファイルのディレクトリを作成
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))

    logging.basicConfig(level=log_level, format=log_format, handlers=handlers, force=True)

    logger = logging.getLogger("crix_etf")
    logger.debug("ログ設定が初期化されました")
    return logger


class ConfigManager:
    """設定管理クラス"""

    def __init__(self, config_path: Optional[str] = "config.yaml"):
        self.config_path = config_path
        self.base_dir = Path(config_path).resolve().parent if config_path else Path.cwd()
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """設定ファイルを読み込み"""
        if self.config_path is None:
            return self._default_config()
        try:
            with open(self.config_path, "r", encoding="utf-8") as file:
                loaded = yaml.safe_load(file) or {}
        except FileNotFoundError:
            logging.getLogger(__name__).warning(
                f"設定ファイル {self.config_path} が見つかりません。デフォルト設定を使用します。"
            )
            return self._default_config()
        # 設定ファイルにないキーはデフォルトで補完
        return _deep_merge(self._default_config(), loaded)

    def _default_config(self) -> Dict[str, Any]:
        """デフォルト設定"""
        return {
            "data": {
                "prices": "./data/prices.csv",
                "volumes": "./data/volumes.csv",
                "attention": "./data/attention.csv",
                "trades": "./data/trades.csv",
                "staleness_days": 3,
                "quote_currency": "USDT",
            },
            "index": {
                "base_level": 1000.0,
                "max_constituents": 30,
                "candidate_ks": None,
                "selection_window_months": 3,
                "reconstitution_months": [1, 4, 7, 10],
            },
            "spreads": {
                "base_asset": "BTC",
                "reference_date": "2021-06-01",
                "reference_window_days": 3,
                "quantile": 0.95,
                "price_weighting": "equal",
                "max_iterations": 200,
                "tolerance": 1.0e-10,
                "curve": {"intercept": 1.866219e-04, "slope": 5.546762e-09},
                "curve_path": None,
                "scaling_exponents": [2, 5, 10],
                "smoothing_days": 7,
            },
            "costs": {
                "enabled": True,
                "spread_share": 0.5,
                "fee_tiers": [
                    {"threshold": 0, "rate": 0.005},
                    {"threshold": 10000, "rate": 0.0035},
                    {"threshold": 50000, "rate": 0.0025},
                    {"threshold": 100000, "rate": 0.002},
                    {"threshold": 1000000, "rate": 0.0018},
                    {"threshold": 10000000, "rate": 0.0015},
                ],
            },
            "flows": {
                "enabled": True,
                "initial_capital": 1000000.0,
                "beta_up": 0.5,
                "beta_down": 0.1,
                "noise_scale": 10000.0,
                "seed": 42,
            },
            "backtest": {
                "start": "2020-07-01",
                "end": "2021-06-01",
                "benchmark_asset": "BTC",
            },
            "output": {"directory": "./output"},
            "logging": {
                "level": "INFO",
                "format": "%(asctime)s - %(levelname)s - %(message)s",
                "file": None,
            },
        }

    def get(self, key: str, default: Any = None) -> Any:
        """設定値を取得"""
        keys = key.split(".")
        value = self.config
        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def set(self, key: str, value: Any) -> None:
        """設定値を上書き（ドット区切りキー）"""
        keys = key.split(".")
        node = self.config
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = value

    def apply_overrides(self, overrides: List[str]) -> None:
        """
        key=value 形式の上書きを適用

        値はYAMLスカラーとして解釈する（数値・真偽値・リストを型付きで受け取るため）
        """
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"上書き指定は key=value 形式である必要があります: {item}")
            key, raw = item.split("=", 1)
            self.set(key.strip(), yaml.safe_load(raw))

    def resolve_path(self, key: str) -> Optional[Path]:
        """設定ファイルの場所を基準にパスを解決"""
        raw = self.get(key)
        if raw is None or raw == "":
            return None
        path = Path(raw)
        return path if path.is_absolute() else (self.base_dir / path)

    def config_hash(self) -> str:
        """実効設定のハッシュ（出力ファイルの来歴確認用）"""
        config_str = json.dumps(self.config, sort_keys=True, default=str)
        return hashlib.sha256(config_str.encode("utf-8")).hexdigest()[:16]


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


# 出力ファイル共通ヘルパー
CONFIG_HASH_PREFIX = "# config_hash="


def write_csv(df: pd.DataFrame, path: Path, config_hash: str) -> Path:
    """設定ハッシュのコメント行付きでCSVを書き出す"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"{CONFIG_HASH_PREFIX}{config_hash}\n")
        df.to_csv(f, index=False, lineterminator="\n")
    return path


def read_output_csv(path: Path) -> pd.DataFrame:
    """write_csv で書き出したCSVを読み込む"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"出力ファイルが見つかりません: {path}")
    return pd.read_csv(path, comment="#")


def write_json(payload: Dict[str, Any], path: Path, config_hash: str) -> Path:
    """設定ハッシュ付きでJSONを書き出す"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"config_hash": config_hash, **payload}
    with open(path, "w", encoding="utf-8", newline="") as f:
        json.dump(document, f, ensure_ascii=False, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return path


def read_json(path: Path) -> Dict[str, Any]:
    """JSONファイルを読み込む"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"出力ファイルが見つかりません: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _json_default(value: Any) -> Any:
    if isinstance(value, pd.Timestamp):
        return value.strftime("%Y-%m-%d")
    if hasattr(value, "item"):
        # numpy スカラー
        return value.item()
    raise TypeError(f"JSONに変換できない型です: {type(value).__name__}")
