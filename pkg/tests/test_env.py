import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sbca import env
from sbca.errors import InsolvencyError, ParameterError, SizeError, ValidationError

COST = env.CostModel(0.0025)
PARAMS = env.RewardParams(0.1, 0.005)


def simplex(n):
    return arrays(np.float64, n, elements=st.floats(0.0, 1.0)).filter(lambda v: v.sum() > 1e-3).map(lambda v: v / v.sum())


def test_hand_computed_step():
    state = env.EnvState(1.0, np.array([0.5, 0.5]))
    new, rec = env.step(state, [0.8, 0.2], [1.02, 0.99], COST, PARAMS)
    gross = 0.5 * 1.02 + 0.5 * 0.99
    to = 0.3
    net = gross - 0.0025 * to
    assert rec.turnover == pytest.approx(to)
    assert rec.net_factor == pytest.approx(net, abs=1e-15)
    assert rec.penalty == pytest.approx(0.005 * to)  # a winning day carries no risk penalty
    assert rec.reward == pytest.approx(math.log(net) - 0.005 * to)
    assert new.net_value == pytest.approx(net)
    assert new.step_index == 1
    assert np.array_equal(new.prev_weights, [0.8, 0.2])


def test_risk_penalty_on_losing_day():
    state = env.EnvState(2.0, np.array([1.0, 0.0]))
    _, rec = env.step(state, [1.0, 0.0], [0.9, 1.1], COST, PARAMS)
    assert rec.turnover == 0.0
    assert rec.penalty == pytest.approx(0.1 * math.log(0.9) ** 2)
    assert rec.net_value == pytest.approx(1.8)


def test_holding_and_trading_parts_sum_to_reward():
    state = env.EnvState(1.0, np.array([0.3, 0.7]))
    _, rec = env.step(state, [0.9, 0.1], [0.97, 1.01], COST, PARAMS)
    assert rec.holding_part + rec.trading_part == pytest.approx(rec.reward, abs=1e-15)
    assert rec.trading_part < 0


def test_insolvency():
    state = env.EnvState(1.0, np.array([1.0, 0.0]))
    with pytest.raises(InsolvencyError):
        env.step(state, [0.0, 1.0], [0.004, 1.0], env.CostModel(0.05), PARAMS)


def test_bad_inputs():
    state = env.EnvState.initial(2)
    with pytest.raises(ValidationError):
        env.step(state, [0.7, 0.7], [1.0, 1.0], COST, PARAMS)
    with pytest.raises(ValidationError):
        env.step(state, [0.5, 0.5], [1.0, 0.0], COST, PARAMS)
    with pytest.raises(SizeError):
        env.step(state, [0.2, 0.3, 0.5], [1.0, 1.0, 1.0], COST, PARAMS)
    with pytest.raises(ValidationError):
        env.as_weights([np.nan, 1.0])
    with pytest.raises(ParameterError):
        env.CostModel(0.2)
    with pytest.raises(ParameterError):
        env.RewardParams(-1.0, 0.0)
    with pytest.raises(ParameterError):
        env.ema_smooth([1.0, 0.0], [0.5, 0.5], 0.0)


def test_tiny_negative_weights_are_clamped():
    w = env.as_weights([1.0 + 5e-13, -5e-13])
    assert w.min() == 0.0 and w.sum() == 1.0


def test_zero_commission_and_penalties_give_log_growth():
    rng = np.random.default_rng(0)
    y = np.exp(rng.normal(0, 0.01, size=(50, 3)))
    w = rng.dirichlet(np.ones(3), size=50)
    ro = env.rollout(y, w, env.CostModel(0.0), env.RewardParams(0.0, 0.0))
    assert ro.rewards.sum() == pytest.approx(math.log(ro.terminal_value), abs=1e-12)


@settings(max_examples=60)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(simplex(n), simplex(n))))
def test_turnover_bounds_and_symmetry(pair):
    a, b = pair
    to = env.turnover(a, b)
    assert 0.0 <= to <= 1.0 + 1e-12
    assert to == pytest.approx(env.turnover(b, a))
    assert env.turnover(a, a) == 0.0


@settings(max_examples=60)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(simplex(n), simplex(n))), st.floats(0.01, 1.0))
def test_ema_stays_on_simplex_and_is_a_contraction(pair, alpha):
    raw, prev = pair
    out = env.ema_smooth(raw, prev, alpha)
    assert abs(out.sum() - 1.0) <= 1e-9 and out.min() >= 0
    assert env.turnover(out, prev) <= alpha * env.turnover(raw, prev) + 1e-12


def test_ema_alpha_one_returns_raw():
    raw = np.array([0.2, 0.8])
    assert np.allclose(env.ema_smooth(raw, [0.5, 0.5], 1.0), raw)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_cumulative_reward_identity(seed, n):
    rng = np.random.default_rng(seed)
    y = np.exp(rng.normal(0.0, 0.02, size=(40, n)))
    w = rng.dirichlet(np.ones(n), size=40)
    ro = env.rollout(y, w, COST, PARAMS)
    assert ro.identity_gap() <= 1e-9


def test_drifted_weights():
    out = env.drifted_weights([0.5, 0.5], [1.1, 0.9])
    assert np.allclose(out, [0.55, 0.45])


def test_trajectory_csv(tmp_path):
    y = np.array([[1.01, 0.99], [1.0, 1.02]])
    w = np.array([[0.6, 0.4], [0.5, 0.5]])
    ro = env.rollout(y, w, COST, PARAMS)
    path = tmp_path / "traj.csv"
    env.write_trajectory_csv(ro.records, path, dates=["2021-01-04", "2021-01-05"])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "date", "V", "TO", "R", "reward", "penalty", "w_1", "w_2"]
    assert len(rows) == 3
    assert float(rows[-1][2]) == pytest.approx(ro.terminal_value)
    with pytest.raises(SizeError):
        env.write_trajectory_csv([], path)
