"""Performance metrics, benchmark strategies and the experiment protocols."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .agent import VARIANTS, Evaluation, SBCAAllocator, TrainConfig, derive_seed, train
from .dataio import PanelDataset
from .env import CostModel, EnvState, RewardParams, Rollout, drifted_weights, step, uniform_weights
from .errors import RangeError, SBCAError, SizeError, UndefinedMetricError, ValidationError

logger = logging.getLogger(__name__)

TRADING_DAYS = 252
COMMISSIONS = (0.001, 0.0025, 0.005, 0.01)
METRICS = ("PV", "AR", "SR", "Sortino", "MDD", "Calmar")


# ---------------------------------------------------------------------------
# metrics


def annual_return(pv: float, n_days: int) -> float:
    if n_days < 1:
        raise SizeError("annual_return needs at least one day")
    if not pv > 0:
        raise ValidationError(f"portfolio value must be positive, got {pv!r}")
    return pv ** (TRADING_DAYS / n_days) - 1.0


def _excess(returns, annual_rf: float) -> tuple[np.ndarray, float]:
    r = np.asarray(returns, dtype=np.float64)
    if r.ndim != 1:
        raise SizeError("expected a 1-D return series")
    return r, float(r.mean() - annual_rf / TRADING_DAYS) if r.size else math.nan


def sharpe(daily_log_returns, annual_rf: float = 0.02) -> float:
    r, excess = _excess(daily_log_returns, annual_rf)
    if r.size < 2:
        raise UndefinedMetricError("Sharpe needs at least two observations")
    sd = float(r.std(ddof=1))
    if sd == 0:
        raise UndefinedMetricError("Sharpe undefined for zero volatility")
    return excess / sd * math.sqrt(TRADING_DAYS)


def sortino(daily_log_returns, annual_rf: float = 0.02) -> float:
    r, excess = _excess(daily_log_returns, annual_rf)
    neg = r[r < 0]
    if neg.size < 2:
        raise UndefinedMetricError("Sortino needs at least two negative returns")
    sd = float(neg.std(ddof=1))
    if sd == 0:
        raise UndefinedMetricError("Sortino undefined for zero downside deviation")
    return excess / sd * math.sqrt(TRADING_DAYS)


def max_drawdown(net_values) -> float:
    v = np.asarray(net_values, dtype=np.float64)
    if v.size == 0:
        raise SizeError("max_drawdown of an empty series")
    if not np.all(v > 0):
        raise ValidationError("net values must be positive")
    peak = np.maximum.accumulate(v)
    return float(((v - peak) / peak).min())


def calmar(ar: float, mdd: float) -> float:
    if mdd == 0:
        raise UndefinedMetricError("Calmar undefined without a drawdown")
    return ar / abs(mdd)


def _maybe(fn: Callable, *args) -> float | None:
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


@dataclass
class RunReport:
    """Six headline metrics plus the series they came from.

    Undefined metrics are ``None``, never zero.  ``net_values`` starts at the
    initial capital ``1.0`` so a first-day loss counts as a drawdown.
    """

    PV: float
    AR: float
    SR: float | None
    Sortino: float | None
    MDD: float
    Calmar: float | None
    log_returns: np.ndarray = field(repr=False)
    net_values: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @classmethod
    def from_series(cls, log_returns, weights, annual_rf: float = 0.02, net_values=None) -> "RunReport":
        log_returns = np.asarray(log_returns, dtype=np.float64)
        if log_returns.size == 0:
            raise SizeError("cannot report on an empty run")
        if net_values is None:
            net_values = np.exp(np.cumsum(log_returns))
        net_values = np.concatenate([[1.0], np.asarray(net_values, dtype=np.float64)])
        pv = float(net_values[-1])
        ar = annual_return(pv, log_returns.size)
        mdd = max_drawdown(net_values)
        return cls(pv, ar, _maybe(sharpe, log_returns, annual_rf), _maybe(sortino, log_returns, annual_rf),
                   mdd, _maybe(calmar, ar, mdd), log_returns, net_values, np.asarray(weights))

    @classmethod
    def from_rollout(cls, rollout: Rollout, annual_rf: float = 0.02) -> "RunReport":
        return cls.from_series(rollout.log_returns, rollout.weights, annual_rf, rollout.net_values)

    @property
    def n_days(self) -> int:
        return int(self.log_returns.size)

    def metrics(self) -> dict:
        return {name: getattr(self, name) for name in METRICS}


# ---------------------------------------------------------------------------
# benchmarks


def benchmark_days(panel: PanelDataset, split: str, window: int = 0) -> np.ndarray:
    """Split days that have a preceding close, optionally skipping the first ``window`` days."""
    days = panel.split_days(split)
    days = days[days >= max(window, 1)]
    if days.size == 0:
        raise RangeError(f"split {split!r} has no tradable day")
    return days


def _run_rule(panel: PanelDataset, days: np.ndarray, cost: CostModel, target: Callable) -> Rollout:
    params = RewardParams()
    state = EnvState.initial(panel.n_assets)
    records = []
    for d in days:
        y = panel.gross_return(int(d))
        held = drifted_weights(state.prev_weights, y)
        state, rec = step(state, target(held), y, cost, params, turnover_ref=held)
        records.append(rec)
    return Rollout(records, state.net_value)


def run_equal_weight(panel: PanelDataset, split: str, cost: CostModel = CostModel(), window: int = 0,
                     annual_rf: float = 0.02) -> RunReport:
    """Rebalance to ``1/N`` every day, paying for the trade back from drifted holdings."""
    target = uniform_weights(panel.n_assets)
    days = benchmark_days(panel, split, window)
    return RunReport.from_rollout(_run_rule(panel, days, cost, lambda held: target), annual_rf)


def run_buy_and_hold(panel: PanelDataset, split: str, cost: CostModel = CostModel(), window: int = 0,
                     annual_rf: float = 0.02) -> RunReport:
    """Start at ``1/N`` and never trade; the commission never applies."""
    days = benchmark_days(panel, split, window)
    return RunReport.from_rollout(_run_rule(panel, days, cost, lambda held: held), annual_rf)


def run_index(index_dates, index_closes, panel: PanelDataset, split: str, window: int = 0,
              annual_rf: float = 0.02) -> RunReport:
    """Metrics of an external price series over the split, normalized to start at 1."""
    days = benchmark_days(panel, split, window)
    wanted = panel.dates[np.concatenate([[days[0] - 1], days])]
    index_dates = np.asarray(index_dates, dtype="datetime64[D]")
    index_closes = np.asarray(index_closes, dtype=np.float64)
    pos = np.searchsorted(index_dates, wanted)
    missing = (pos >= index_dates.size) | (index_dates[np.minimum(pos, index_dates.size - 1)] != wanted)
    if missing.any():
        raise RangeError(f"index has no close on {wanted[missing][0]}")
    closes = index_closes[pos]
    if not np.all(closes > 0):
        raise ValidationError("index closes must be positive")
    return RunReport.from_series(np.diff(np.log(closes)), np.ones((days.size, 1)), annual_rf)


def agent_report(evaluation: Evaluation, annual_rf: float = 0.02) -> RunReport:
    return RunReport.from_rollout(evaluation.rollout, annual_rf)


# ---------------------------------------------------------------------------
# experiment protocols


@dataclass
class SweepCell:
    group: str
    strategy: str
    commission: float
    sharpe: float | None
    pv: float


def cost_sweep(panel: PanelDataset, split: str, allocators: Mapping[str, SBCAAllocator],
               commissions: Sequence[float] = COMMISSIONS, group: str = "", include_benchmarks: bool = True,
               window: int | None = None, annual_rf: float = 0.02) -> list[SweepCell]:
    """Sharpe per (strategy, commission); trained allocators are re-evaluated, never retrained."""
    if window is None:
        window = next(iter(allocators.values())).window if allocators else 0
    runners: dict[str, Callable[[float], RunReport]] = {}
    for name, est in allocators.items():
        runners[name] = lambda c, est=est: agent_report(est.evaluate(panel, split, commission=c), annual_rf)
    if include_benchmarks:
        runners["EqualWeight"] = lambda c: run_equal_weight(panel, split, CostModel(c), window, annual_rf)
        runners["BuyAndHold"] = lambda c: run_buy_and_hold(panel, split, CostModel(c), window, annual_rf)
    cells = []
    for name, run in runners.items():
        for c in commissions:
            report = run(float(c))
            cells.append(SweepCell(group, name, float(c), report.SR, report.PV))
    return cells


@dataclass
class AblationCell:
    group: str
    variant: str
    report: RunReport | None
    allocator: SBCAAllocator | None = field(default=None, repr=False)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.report is None


def ablation_grid(groups: Mapping[str, PanelDataset], config: TrainConfig = TrainConfig(),
                  variants: Sequence[str] = VARIANTS, split: str = "test", monitor=None) -> list[AblationCell]:
    """Train every (group, variant) cell on its own PRNG stream and report on ``split``.

    A cell that fails to train is recorded with its error and the grid moves on.
    """
    cells = []
    for group, panel in groups.items():
        for variant in variants:
            try:
                est = SBCAAllocator(variant=variant, **{k: getattr(config, k) for k in TrainConfig.field_names()})
                result = train(panel, variant, config, seed_seq=derive_seed(config.seed, group, variant),
                               monitor=monitor)
                est.network_, est.scaler_, est.train_log_ = result.network, result.scaler, result.log
                est.tickers_, est.n_features_in_ = panel.tickers, panel.n_assets
                report = agent_report(est.evaluate(panel, split), config.rf_annual)
                cells.append(AblationCell(group, variant, report, est))
            except SBCAError as exc:
                logger.error("ablation cell %s/%s failed: %s", group, variant, exc)
                cells.append(AblationCell(group, variant, None, error=f"{type(exc).__name__}: {exc}"))
    return cells


# ---------------------------------------------------------------------------
# writers


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_report_csv(rows: Sequence[tuple[str, str, RunReport | None]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["group", "strategy", *METRICS])
        for group, strategy, report in rows:
            values = [None] * len(METRICS) if report is None else [getattr(report, m) for m in METRICS]
            out.writerow([group, strategy, *map(_fmt, values)])


def report_payload(rows: Sequence[tuple[str, str, RunReport | None]]) -> list[dict]:
    payload = []
    for group, strategy, report in rows:
        entry = {"group": group, "strategy": strategy}
        if report is None:
            entry.update({m: None for m in METRICS}, failed=True)
        else:
            entry.update(report.metrics(), n_days=report.n_days)
        payload.append(entry)
    return payload


def write_json(payload, path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_sweep_csv(cells: Sequence[SweepCell], path) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["group", "strategy", "commission", "sharpe"])
        for cell in cells:
            out.writerow([cell.group, cell.strategy, repr(cell.commission), _fmt(cell.sharpe)])


def write_ablation_csv(cells: Sequence[AblationCell], path) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["group", "variant", *METRICS, "status"])
        for cell in cells:
            values = [None] * len(METRICS) if cell.failed else [getattr(cell.report, m) for m in METRICS]
            out.writerow([cell.group, cell.variant, *map(_fmt, values), cell.error or "ok"])


def write_pv_curves(curves: Mapping[str, np.ndarray], path, dates: Sequence | None = None) -> None:
    """One column per strategy, one row per day (including the initial 1.0)."""
    names = list(curves)
    lengths = {len(curves[n]) for n in names}
    if len(lengths) != 1:
        raise SizeError("pv curves must share a length")
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow((["date"] if dates is not None else ["t"]) + names)
        for t in range(lengths.pop()):
            key = str(dates[t]) if dates is not None else t
            out.writerow([key, *(repr(float(curves[n][t])) for n in names)])
