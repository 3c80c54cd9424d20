"""Loading, aligning, splitting and featurizing price and sentiment data."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import RangeError, SchemaError, SizeError, ValidationError, WindowError

logger = logging.getLogger(__name__)

NEUTRAL_SENTIMENT = 0.5
TITLE_SEPARATOR = " ||| "
MAX_FORWARD_FILL = 3
STD_FLOOR = 1e-8
PANEL_SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PriceSeries:
    ticker: str
    dates: np.ndarray  # datetime64[D], strictly increasing
    close: np.ndarray

    def __len__(self) -> int:
        return len(self.dates)


@dataclass(frozen=True)
class SentimentSeries:
    ticker: str
    dates: np.ndarray
    score: np.ndarray


@dataclass(frozen=True)
class NewsRecord:
    date: np.datetime64
    ticker: str
    title: str
    score: float


@dataclass
class AlignmentResult:
    series: list[SentimentSeries]
    titles: dict[tuple[str, str], str]
    n_dropped: int
    coverage: float


@dataclass(frozen=True)
class StateVector:
    price_block: np.ndarray  # W*N, time-major
    text_block: np.ndarray  # N, in [-1, 1]


@dataclass(frozen=True)
class PanelDataset:
    """Aligned panel of ``days x assets`` matrices on a shared trading calendar.

    ``returns[0]`` has no prior close and is stored as 0.
    """

    tickers: tuple[str, ...]
    dates: np.ndarray
    closes: np.ndarray
    returns: np.ndarray
    sentiment: np.ndarray
    split: np.ndarray | None = None
    titles: dict = field(default_factory=dict, compare=False)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    @property
    def gross_returns(self) -> np.ndarray:
        return self.closes[1:] / self.closes[:-1]

    def gross_return(self, t: int) -> np.ndarray:
        """Price relatives y_t = p_t / p_{t-1} for day index ``t >= 1``."""
        if t < 1:
            raise RangeError("day 0 has no prior close")
        return self.closes[t] / self.closes[t - 1]

    def split_days(self, tag: str) -> np.ndarray:
        if self.split is None:
            raise RangeError("panel has no split tags")
        if tag not in SPLITS:
            raise ValueError(f"unknown split {tag!r}")
        return np.flatnonzero(self.split == tag)

    def subset(self, tickers: Sequence[str]) -> "PanelDataset":
        missing = [t for t in tickers if t not in self.tickers]
        if missing:
            raise ValidationError(f"tickers not in panel: {missing}")
        idx = [self.tickers.index(t) for t in tickers]
        titles = {k: v for k, v in self.titles.items() if k[0] in tickers}
        return replace(self, tickers=tuple(tickers), closes=self.closes[:, idx], returns=self.returns[:, idx],
                       sentiment=self.sentiment[:, idx], titles=titles)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(self.tickers).encode())
        h.update(self.dates.astype("datetime64[D]").astype(np.int64).tobytes())
        for arr in (self.closes, self.returns, self.sentiment):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# loaders


def _require_columns(df: pd.DataFrame, required: Iterable[str], path) -> None:
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")


def _parse_dates(values, path) -> np.ndarray:
    try:
        return pd.to_datetime(values, format="%Y-%m-%d").values.astype("datetime64[D]")
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"{path}: dates must be ISO YYYY-MM-DD ({exc})") from None


def load_prices(path) -> list[PriceSeries]:
    """Read ``date,ticker,close`` (other OHLCV columns ignored) into per-ticker series."""
    df = pd.read_csv(path, dtype={"ticker": str}, float_precision="round_trip")
    _require_columns(df, ("date", "ticker", "close"), path)
    close = pd.to_numeric(df["close"], errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~(close > 0))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"{path}: row {i} has nonpositive or missing close {df['close'].iloc[i]!r}")
    dates = _parse_dates(df["date"], path)
    dup = pd.DataFrame({"d": dates, "t": df["ticker"]}).duplicated()
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise ValidationError(f"{path}: duplicate (date, ticker) at row {i}")

    out = []
    for ticker in sorted(df["ticker"].unique()):
        mask = (df["ticker"] == ticker).to_numpy()
        order = np.argsort(dates[mask], kind="stable")
        out.append(PriceSeries(ticker, dates[mask][order], close[mask][order]))
    return out


def load_news(path) -> list[NewsRecord]:
    """Read ``date,ticker,title,delta_bert``; scores must lie in [0, 1]."""
    df = pd.read_csv(path, dtype={"ticker": str, "title": str}, keep_default_na=False,
                     float_precision="round_trip")
    _require_columns(df, ("date", "ticker", "title", "delta_bert"), path)
    score = pd.to_numeric(df["delta_bert"], errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~((score >= 0) & (score <= 1)))
    if bad.size:
        raise ValidationError(f"{path}: row {int(bad[0])} has delta_bert outside [0, 1]")
    dates = _parse_dates(df["date"], path)
    return [NewsRecord(d, t, title, float(s)) for d, t, title, s in zip(dates, df["ticker"], df["title"], score)]


def load_index(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a benchmark ``date,close`` file."""
    df = pd.read_csv(path, float_precision="round_trip")
    _require_columns(df, ("date", "close"), path)
    dates = _parse_dates(df["date"], path)
    close = df["close"].to_numpy(dtype=np.float64)
    if not (close > 0).all():
        raise ValidationError(f"{path}: nonpositive index close")
    order = np.argsort(dates, kind="stable")
    return dates[order], close[order]


# ---------------------------------------------------------------------------
# calendar and alignment


def build_calendar(series: Sequence[PriceSeries], max_fill: int = MAX_FORWARD_FILL) -> tuple[np.ndarray, np.ndarray]:
    """Shared trading calendar and the aligned ``days x assets`` close matrix.

    A ticker missing a day is forward-filled when the gap is at most
    ``max_fill`` consecutive days; otherwise the day is dropped for everyone.
    """
    if not series:
        raise SizeError("no price series")
    union = np.unique(np.concatenate([s.dates for s in series]))
    frame = pd.DataFrame(index=union)
    for s in series:
        frame[s.ticker] = pd.Series(s.close, index=s.dates)
    missing = frame.isna()
    # length of the NaN run each missing cell belongs to
    run_id = (~missing).cumsum()
    run_len = missing.apply(lambda col: col.groupby((~col).cumsum()).transform("sum"))
    leading = missing & (run_id == 0)
    too_long = missing & ((run_len > max_fill) | leading)
    keep = ~too_long.any(axis=1).to_numpy()
    filled = frame.ffill()
    if missing.to_numpy().any():
        logger.info("calendar: %d day(s) forward-filled, %d dropped",
                    int((missing.any(axis=1) & keep).sum()), int((~keep).sum()))
    return union[keep], filled.to_numpy()[keep]


def align_news(records: Iterable[NewsRecord], calendar: np.ndarray, tickers: Sequence[str]) -> AlignmentResult:
    """Attach each news record to the first trading day strictly after its calendar date.

    Titles landing on the same ``(ticker, day)`` are joined with ``" ||| "``
    and their scores averaged; days without news get the neutral score 0.5.
    Records with no later trading day are dropped and counted.
    """
    calendar = np.asarray(calendar, dtype="datetime64[D]")
    if calendar.size == 0:
        raise SizeError("empty calendar")
    if np.any(np.diff(calendar) <= np.timedelta64(0, "D")):
        raise ValidationError("calendar must be strictly increasing")
    col = {t: i for i, t in enumerate(tickers)}
    total = np.zeros((calendar.size, len(tickers)))
    count = np.zeros_like(total)
    titles: dict[tuple[int, int], list[str]] = {}
    dropped = 0
    for rec in records:
        if rec.ticker not in col:
            continue
        day = int(np.searchsorted(calendar, np.datetime64(rec.date, "D"), side="right"))
        if day >= calendar.size:
            dropped += 1
            continue
        j = col[rec.ticker]
        total[day, j] += rec.score
        count[day, j] += 1
        titles.setdefault((day, j), []).append(rec.title)
    if dropped:
        logger.warning("align_news: dropped %d record(s) after the last trading day", dropped)
    score = np.where(count > 0, total / np.maximum(count, 1), NEUTRAL_SENTIMENT)
    series = [SentimentSeries(t, calendar.copy(), score[:, j].copy()) for t, j in col.items()]
    joined = {(tickers[j], str(calendar[d])): TITLE_SEPARATOR.join(ts) for (d, j), ts in titles.items()}
    return AlignmentResult(series, joined, dropped, float((count > 0).mean()))


def log_returns(prices) -> np.ndarray:
    """ln(p_t / p_{t-1}); one shorter than the input."""
    p = np.asarray(prices.close if isinstance(prices, PriceSeries) else prices, dtype=np.float64)
    if p.size < 2:
        raise SizeError("need at least two prices for a return")
    return np.log(p[1:] / p[:-1])


def build_panel(prices: Sequence[PriceSeries], news: Iterable[NewsRecord] = ()) -> tuple[PanelDataset, AlignmentResult]:
    calendar, closes = build_calendar(prices)
    if calendar.size < 2:
        raise SizeError("calendar needs at least two days")
    tickers = tuple(s.ticker for s in prices)
    aligned = align_news(news, calendar, tickers)
    returns = np.zeros_like(closes)
    returns[1:] = np.log(closes[1:] / closes[:-1])
    sentiment = np.column_stack([s.score for s in aligned.series])
    panel = PanelDataset(tickers, calendar, closes, returns, sentiment, titles=aligned.titles)
    return panel, aligned


# ---------------------------------------------------------------------------
# splitting


def split_time_series(panel: PanelDataset, boundaries: Sequence) -> PanelDataset:
    """Tag days ``<= b1`` train, ``(b1, b2]`` val and ``> b2`` test."""
    if len(boundaries) != 2:
        raise SizeError("need exactly two boundary dates")
    b1, b2 = (np.datetime64(b, "D") for b in boundaries)
    first, last = panel.dates[0], panel.dates[-1]
    for b in (b1, b2):
        if b < first or b > last:
            raise RangeError(f"boundary {b} outside calendar [{first}, {last}]")
    tags = np.where(panel.dates <= b1, "train", np.where(panel.dates <= b2, "val", "test")).astype("<U5")
    for name in SPLITS:
        if not (tags == name).any():
            raise RangeError(f"boundaries {b1}, {b2} leave the {name} split empty")
    return replace(panel, split=tags)


def split_by_fraction(panel: PanelDataset, fractions: Sequence[float] = (0.64, 0.18, 0.18)) -> PanelDataset:
    """Split by day counts rather than dates (used for synthetic panels)."""
    n = panel.n_days
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n_train < 1 or n_val < 1 or n_train + n_val >= n:
        raise RangeError("fractions leave a split empty")
    return split_time_series(panel, (panel.dates[n_train - 1], panel.dates[n_train + n_val - 1]))


# ---------------------------------------------------------------------------
# features


class FeatureScaler(TransformerMixin, BaseEstimator):
    """Per-asset standardization of log returns, fitted on training rows only."""

    def __init__(self, std_floor: float = STD_FLOOR):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise SizeError("FeatureScaler.fit expects a non-empty (days, assets) matrix")
        self.mean_ = X.mean(axis=0)
        self.std_ = np.maximum(X.std(axis=0), self.std_floor)
        return self

    def transform(self, X):
        check_is_fitted(self, ("mean_", "std_"))
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean_.shape[0]:
            raise SizeError(f"expected {self.mean_.shape[0]} assets, got {X.shape[-1]}")
        return (X - self.mean_) / self.std_

    @classmethod
    def from_panel(cls, panel: PanelDataset) -> "FeatureScaler":
        """Fit on the returns of the training split (day 0 has no return)."""
        days = panel.split_days("train")
        days = days[days >= 1]
        return cls().fit(panel.returns[days])


def build_state(panel: PanelDataset, scaler: FeatureScaler, t: int, window: int) -> StateVector:
    """State at the close of day ``t``: the last ``window`` returns and day-``t`` sentiment."""
    if t < window:
        raise WindowError(f"day {t} has fewer than {window} prior returns")
    if t >= panel.n_days:
        raise RangeError(f"day {t} beyond panel end")
    block = scaler.transform(panel.returns[t - window + 1:t + 1])
    return StateVector(block.ravel(), 2.0 * (panel.sentiment[t] - NEUTRAL_SENTIMENT))


def build_states(panel: PanelDataset, scaler: FeatureScaler, days: Sequence[int], window: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked price and text blocks for ``days``: shapes ``(K, W*N)`` and ``(K, N)``."""
    days = np.asarray(days, dtype=int)
    if days.size and days.min() < window:
        raise WindowError(f"day {int(days.min())} has fewer than {window} prior returns")
    z = scaler.transform(panel.returns)
    offsets = np.arange(-window + 1, 1)
    price = z[days[:, None] + offsets[None, :]].reshape(days.size, -1)
    text = 2.0 * (panel.sentiment[days] - NEUTRAL_SENTIMENT)
    return price, text


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(seed: int, n_assets: int, n_days: int, drift=0.0, vol=0.01,
                   news_coverage: float = 0.8, window: int = 30, start: str = "2012-01-03",
                   tickers: Sequence[str] | None = None) -> PanelDataset:
    """Seeded geometric random walk with random sentiment, split 64/18/18 by day count.

    ``drift`` and ``vol`` are per-day log drift and volatility, scalar or per asset.
    Days without a drawn news item carry neutral sentiment.
    """
    if n_days <= window + 10:
        raise SizeError(f"n_days must exceed window + 10 = {window + 10}")
    rng = np.random.default_rng(seed)
    drift = np.broadcast_to(np.asarray(drift, dtype=np.float64), (n_assets,))
    vol = np.broadcast_to(np.asarray(vol, dtype=np.float64), (n_assets,))
    shocks = rng.standard_normal((n_days - 1, n_assets))
    steps = np.vstack([np.zeros((1, n_assets)), drift + vol * shocks])
    closes = 100.0 * np.exp(np.cumsum(steps, axis=0))
    returns = np.zeros_like(closes)
    returns[1:] = np.log(closes[1:] / closes[:-1])
    has_news = rng.random((n_days, n_assets)) < news_coverage
    raw = rng.beta(2.0, 2.0, size=(n_days, n_assets))
    sentiment = np.where(has_news, raw, NEUTRAL_SENTIMENT)
    sentiment[0] = NEUTRAL_SENTIMENT  # nothing precedes the first trading day
    dates = np.busday_offset(np.datetime64(start, "D"), np.arange(n_days), roll="forward")
    names = tuple(tickers) if tickers is not None else tuple(f"A{i}" for i in range(n_assets))
    if len(names) != n_assets:
        raise SizeError("tickers length must equal n_assets")
    panel = PanelDataset(names, dates, closes, returns, sentiment)
    return split_by_fraction(panel)


def synthetic_news(panel: PanelDataset) -> list[NewsRecord]:
    """News records that align back onto ``panel.sentiment`` (dated the prior calendar day)."""
    out = []
    for d in range(1, panel.n_days):
        for j, ticker in enumerate(panel.tickers):
            score = float(panel.sentiment[d, j])
            if score != NEUTRAL_SENTIMENT:
                out.append(NewsRecord(panel.dates[d] - np.timedelta64(1, "D"), ticker, f"{ticker} headline {d}", score))
    return out


def write_price_csv(panel: PanelDataset, path) -> None:
    rows = {
        "date": np.repeat(panel.dates.astype(str), panel.n_assets),
        "ticker": np.tile(panel.tickers, panel.n_days),
        "close": panel.closes.ravel(),
    }
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")


def write_news_csv(records: Sequence[NewsRecord], path) -> None:
    pd.DataFrame({
        "date": [str(r.date) for r in records],
        "ticker": [r.ticker for r in records],
        "title": [r.title for r in records],
        "delta_bert": [r.score for r in records],
    }).to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# panel.json


def panel_to_dict(panel: PanelDataset) -> dict:
    return {
        "schema_version": PANEL_SCHEMA_VERSION,
        "tickers": list(panel.tickers),
        "dates": panel.dates.astype(str).tolist(),
        "closes": panel.closes.tolist(),
        "sentiment": panel.sentiment.tolist(),
        "split": None if panel.split is None else panel.split.tolist(),
        "titles": [[t, d, title] for (t, d), title in sorted(panel.titles.items())],
    }


def panel_from_dict(payload: dict) -> PanelDataset:
    version = payload.get("schema_version")
    if version != PANEL_SCHEMA_VERSION:
        raise SchemaError(f"unsupported panel schema_version {version!r}")
    closes = np.asarray(payload["closes"], dtype=np.float64)
    returns = np.zeros_like(closes)
    returns[1:] = np.log(closes[1:] / closes[:-1])
    split = payload.get("split")
    return PanelDataset(
        tuple(payload["tickers"]),
        np.asarray(payload["dates"], dtype="datetime64[D]"),
        closes,
        returns,
        np.asarray(payload["sentiment"], dtype=np.float64),
        None if split is None else np.asarray(split, dtype="<U5"),
        {(t, d): title for t, d, title in payload.get("titles", [])},
    )


def write_panel(panel: PanelDataset, path) -> None:
    Path(path).write_text(json.dumps(panel_to_dict(panel)))


def read_panel(path) -> PanelDataset:
    return panel_from_dict(json.loads(Path(path).read_text()))
