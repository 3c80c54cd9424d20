import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbca import evaluation as ev
from sbca.dataio import synth_generate
from sbca.env import CostModel
from sbca.errors import RangeError, SizeError, UndefinedMetricError, ValidationError


@pytest.fixture(scope="module")
def panel():
    return synth_generate(11, 3, 400, vol=0.015)


def test_annual_return_examples():
    assert ev.annual_return(1.0, 100) == 0.0
    assert ev.annual_return(1.21, 504) == pytest.approx(0.1)
    with pytest.raises(SizeError):
        ev.annual_return(1.1, 0)
    with pytest.raises(ValidationError):
        ev.annual_return(0.0, 10)


def test_sharpe_hand_computed():
    r = np.array([0.01, -0.005, 0.002, 0.004])
    expected = (r.mean() - 0.02 / 252) / r.std(ddof=1) * math.sqrt(252)
    assert ev.sharpe(r) == pytest.approx(expected, rel=1e-12)
    assert ev.sharpe(r, annual_rf=0.0) == pytest.approx(r.mean() / r.std(ddof=1) * math.sqrt(252))


def test_sortino_uses_negative_returns_only():
    r = np.array([0.03, -0.01, 0.02, -0.03])
    neg = np.array([-0.01, -0.03])
    assert ev.sortino(r, 0.0) == pytest.approx(r.mean() / neg.std(ddof=1) * math.sqrt(252))


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        ev.sharpe([0.01])
    with pytest.raises(UndefinedMetricError):
        ev.sharpe([0.01, 0.01, 0.01])
    with pytest.raises(UndefinedMetricError):
        ev.sortino([0.01, -0.02, 0.03])
    with pytest.raises(UndefinedMetricError):
        ev.calmar(0.1, 0.0)


def test_max_drawdown():
    assert ev.max_drawdown([1.0, 1.2, 0.9, 1.1, 0.6, 1.5]) == pytest.approx(0.6 / 1.2 - 1)
    assert ev.max_drawdown([1.0, 1.1, 1.2]) == 0.0
    with pytest.raises(SizeError):
        ev.max_drawdown([])
    with pytest.raises(ValidationError):
        ev.max_drawdown([1.0, -0.1])


@settings(max_examples=50)
@given(st.lists(st.floats(-0.05, 0.05), min_size=1, max_size=60))
def test_drawdown_range_and_monotone_series(steps):
    v = np.exp(np.cumsum(steps))
    mdd = ev.max_drawdown(np.concatenate([[1.0], v]))
    assert -1.0 < mdd <= 0.0
    assert ev.max_drawdown(np.exp(np.cumsum(np.abs(steps)))) == 0.0


@settings(max_examples=50)
@given(st.floats(0.2, 5.0), st.integers(21, 2000))
def test_annual_return_inverts(pv, n):
    ar = ev.annual_return(pv, n)
    assert (1 + ar) ** (n / 252) == pytest.approx(pv, rel=1e-9)


def test_report_with_first_day_loss_counts_as_drawdown():
    rep = ev.RunReport.from_series([math.log(0.9), math.log(1.5)], np.ones((2, 1)))
    assert rep.MDD == pytest.approx(-0.1)
    assert rep.PV == pytest.approx(1.35)
    assert rep.Sortino is None  # a single down day
    assert rep.n_days == 2
    assert set(rep.metrics()) == set(ev.METRICS)


def test_report_on_flat_run_keeps_undefined_metrics_as_none():
    rep = ev.RunReport.from_series(np.zeros(5), np.ones((5, 1)))
    assert rep.SR is None and rep.Calmar is None and rep.MDD == 0.0
    with pytest.raises(SizeError):
        ev.RunReport.from_series([], np.ones((0, 1)))


def test_buy_and_hold_ignores_commission(panel):
    reports = [ev.run_buy_and_hold(panel, "test", CostModel(c)) for c in ev.COMMISSIONS]
    assert all(r.SR == reports[0].SR and r.PV == reports[0].PV for r in reports)
    # never trades: terminal value equals the value of the initial 1/N basket
    days = ev.benchmark_days(panel, "test")
    growth = panel.closes[days[-1]] / panel.closes[days[0] - 1]
    assert reports[0].PV == pytest.approx(growth.mean(), rel=1e-12)


def test_equal_weight_decreasing_in_commission(panel):
    pvs = [ev.run_equal_weight(panel, "test", CostModel(c)).PV for c in ev.COMMISSIONS]
    assert all(a > b for a, b in zip(pvs, pvs[1:]))


def test_equal_weight_zero_commission_matches_mean_return(panel):
    rep = ev.run_equal_weight(panel, "val", CostModel(0.0))
    days = ev.benchmark_days(panel, "val")
    expected = np.prod([panel.gross_return(int(d)).mean() for d in days])
    assert rep.PV == pytest.approx(expected, rel=1e-12)


def test_benchmark_window_skips_days(panel):
    assert ev.benchmark_days(panel, "train", 30)[0] == 30
    assert ev.benchmark_days(panel, "train")[0] == 1


def test_index_report(panel):
    dates = panel.dates
    closes = np.linspace(100.0, 150.0, dates.size)
    rep = ev.run_index(dates, closes, panel, "test")
    days = ev.benchmark_days(panel, "test")
    assert rep.PV == pytest.approx(closes[days[-1]] / closes[days[0] - 1])
    with pytest.raises(RangeError):
        ev.run_index(dates[:-1], closes[:-1], panel, "test")


def test_writers(tmp_path, panel):
    rep = ev.run_equal_weight(panel, "test")
    rows = [("g", "EqualWeight", rep), ("g", "broken", None)]
    ev.write_report_csv(rows, tmp_path / "r.csv")
    lines = list(csv.reader((tmp_path / "r.csv").open()))
    assert lines[0] == ["group", "strategy", *ev.METRICS]
    assert lines[2][2:] == [""] * 6
    payload = ev.report_payload(rows)
    ev.write_json(payload, tmp_path / "r.json")
    back = json.loads((tmp_path / "r.json").read_text())
    assert back[1]["failed"] is True and back[0]["PV"] == rep.PV

    cells = [ev.SweepCell("g", "EqualWeight", 0.001, None, 1.0)]
    ev.write_sweep_csv(cells, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == ["group,strategy,commission,sharpe",
                                                            "g,EqualWeight,0.001,"]
    ev.write_pv_curves({"a": [1.0, 1.1], "b": [1.0, 0.9]}, tmp_path / "pv.csv")
    assert (tmp_path / "pv.csv").read_text().splitlines()[0] == "t,a,b"
    with pytest.raises(SizeError):
        ev.write_pv_curves({"a": [1.0], "b": [1.0, 2.0]}, tmp_path / "pv.csv")


def test_cost_sweep_benchmarks_only(panel):
    cells = ev.cost_sweep(panel, "test", {}, group="3assets", window=30)
    assert {c.strategy for c in cells} == {"EqualWeight", "BuyAndHold"}
    assert len(cells) == 2 * len(ev.COMMISSIONS)
    bh = [c.sharpe for c in cells if c.strategy == "BuyAndHold"]
    assert max(bh) - min(bh) <= 1e-12
