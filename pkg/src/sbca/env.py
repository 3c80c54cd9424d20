"""Portfolio environment: turnover, EMA smoothing, net-value recursion and the risk-sensitive reward.

Timing follows the net-value recursion literally: the step that installs new
weights ``w_t`` earns ``w_{t-1} . y_t`` and pays ``c * TO_t`` with
``TO_t = 0.5 * |w_t - w_{t-1}|_1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsolvencyError, ParameterError, SizeError, ValidationError

SIMPLEX_TOL = 1e-9
NEG_CLAMP = 1e-12


def as_weights(w, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate a long-only budget-constrained weight vector.

    Entries down to ``-1e-12`` are treated as rounding noise, clamped to zero
    and the vector renormalized.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise SizeError("weights must be a non-empty vector")
    if not np.all(np.isfinite(w)):
        raise ValidationError("weights contain non-finite entries")
    if w.min() < -NEG_CLAMP or abs(w.sum() - 1.0) > tol:
        raise ValidationError(f"weights off the simplex (sum={w.sum()!r}, min={w.min()!r})")
    if w.min() < 0:
        w = np.maximum(w, 0.0)
        w = w / w.sum()
    return w


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


@dataclass(frozen=True)
class CostModel:
    commission: float = 0.0025

    def __post_init__(self):
        if not 0.0 <= self.commission <= 0.05:
            raise ParameterError(f"commission {self.commission} outside [0, 0.05]")


@dataclass(frozen=True)
class RewardParams:
    lambda_risk: float = 0.1
    lambda_turnover: float = 0.005

    def __post_init__(self):
        if self.lambda_risk < 0 or self.lambda_turnover < 0:
            raise ParameterError("penalty coefficients must be nonnegative")


@dataclass(frozen=True)
class EnvState:
    net_value: float
    prev_weights: np.ndarray
    step_index: int = 0

    @classmethod
    def initial(cls, n_assets: int) -> "EnvState":
        return cls(1.0, uniform_weights(n_assets), 0)


@dataclass(frozen=True)
class StepRecord:
    reward: float
    penalty: float
    turnover: float
    net_factor: float
    net_value: float
    weights: np.ndarray = field(repr=False)
    gross_factor: float = math.nan
    risk_penalty: float = math.nan

    @property
    def log_return(self) -> float:
        return math.log(self.net_factor)

    @property
    def holding_part(self) -> float:
        """Reward share earned by the weights held into this step: log gross return minus the risk penalty."""
        return math.log(self.gross_factor) - self.risk_penalty

    @property
    def trading_part(self) -> float:
        """Reward share caused by the trade made at this step: log cost drag minus the turnover penalty."""
        return math.log(self.net_factor / self.gross_factor) - (self.penalty - self.risk_penalty)


def turnover(w_new, w_old) -> float:
    w_new = np.asarray(w_new, dtype=np.float64)
    w_old = np.asarray(w_old, dtype=np.float64)
    if w_new.shape != w_old.shape:
        raise SizeError(f"turnover: shapes {w_new.shape} and {w_old.shape} differ")
    return 0.5 * float(np.abs(w_new - w_old).sum())


def ema_smooth(w_raw, w_prev, alpha: float) -> np.ndarray:
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"EMA alpha {alpha} outside (0, 1]")
    w_raw, w_prev = as_weights(w_raw), as_weights(w_prev)
    if w_raw.shape != w_prev.shape:
        raise SizeError("ema_smooth: shape mismatch")
    return as_weights(alpha * w_raw + (1.0 - alpha) * w_prev)


def drifted_weights(w, y) -> np.ndarray:
    """Weights after one period of price moves with no trading."""
    grown = np.asarray(w) * np.asarray(y)
    return grown / grown.sum()


def risk_penalty(net_factor: float, params: RewardParams) -> float:
    downside = max(-math.log(net_factor), 0.0)
    return params.lambda_risk * downside * downside


def penalty(net_factor: float, to: float, params: RewardParams) -> float:
    return risk_penalty(net_factor, params) + params.lambda_turnover * to


def step(state: EnvState, w_t, y_t, cost: CostModel, params: RewardParams,
         turnover_ref=None) -> tuple[EnvState, StepRecord]:
    """Install ``w_t`` and realize the period return of the previous weights.

    ``turnover_ref`` overrides the reference the turnover is measured against
    (default: ``state.prev_weights``).  Benchmarks use it to charge the trade
    from drifted holdings.
    """
    w_t = as_weights(w_t)
    y_t = np.asarray(y_t, dtype=np.float64)
    if y_t.shape != w_t.shape or state.prev_weights.shape != w_t.shape:
        raise SizeError("step: weights and returns must share a shape")
    if not np.all(y_t > 0):
        raise ValidationError("gross returns must be positive")
    ref = state.prev_weights if turnover_ref is None else turnover_ref
    to = turnover(w_t, ref)
    gross = float(state.prev_weights @ y_t)
    net_factor = gross - cost.commission * to
    if not net_factor > 0:
        raise InsolvencyError(state.step_index, net_factor)
    risk = risk_penalty(net_factor, params)
    pen = risk + params.lambda_turnover * to
    value = state.net_value * net_factor
    record = StepRecord(math.log(net_factor) - pen, pen, to, net_factor, value, w_t, gross, risk)
    return EnvState(value, w_t, state.step_index + 1), record


@dataclass
class Rollout:
    records: list[StepRecord]
    terminal_value: float

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records])

    @property
    def penalties(self) -> np.ndarray:
        return np.array([r.penalty for r in self.records])

    @property
    def net_values(self) -> np.ndarray:
        return np.array([r.net_value for r in self.records])

    @property
    def log_returns(self) -> np.ndarray:
        return np.array([r.log_return for r in self.records])

    @property
    def weights(self) -> np.ndarray:
        return np.array([r.weights for r in self.records])

    def identity_gap(self) -> float:
        """|sum r_t - (ln V_T - sum P_t)|; zero up to rounding for every rollout."""
        return abs(float(self.rewards.sum()) - (math.log(self.terminal_value) - float(self.penalties.sum())))


def rollout(gross_returns, weights, cost: CostModel, params: RewardParams, initial: EnvState | None = None) -> Rollout:
    """Run ``step`` over aligned ``(T, N)`` arrays of price relatives and weights."""
    gross_returns = np.asarray(gross_returns, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if gross_returns.shape != weights.shape or gross_returns.ndim != 2:
        raise SizeError("rollout expects matching (T, N) arrays")
    state = initial or EnvState.initial(weights.shape[1])
    records = []
    for y, w in zip(gross_returns, weights):
        state, rec = step(state, w, y, cost, params)
        records.append(rec)
    return Rollout(records, state.net_value)


def write_trajectory_csv(records: Sequence[StepRecord], path, dates: Sequence | None = None) -> None:
    """``t,V,TO,R,reward,penalty,w_1..w_N`` (plus ``date`` when given)."""
    if not records:
        raise SizeError("empty trajectory")
    n = records[0].weights.size
    header = ["t", "V", "TO", "R", "reward", "penalty"] + [f"w_{i + 1}" for i in range(n)]
    if dates is not None:
        header.insert(1, "date")
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for t, rec in enumerate(records):
            row = [t, repr(rec.net_value), repr(rec.turnover), repr(rec.net_factor), repr(rec.reward), repr(rec.penalty)]
            row += [repr(float(x)) for x in rec.weights]
            if dates is not None:
                row.insert(1, str(dates[t]))
            out.writerow(row)
