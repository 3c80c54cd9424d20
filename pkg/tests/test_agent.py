import math

import numpy as np
import pytest
from scipy import stats
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sbca import agent
from sbca import netcore as nc
from sbca.dataio import FeatureScaler, synth_generate
from sbca.errors import ParameterError, RangeError, SizeError

SMALL = dict(hidden=8, window=5, max_epochs=2, patience=2)


@pytest.fixture(scope="module")
def panel():
    return synth_generate(21, 2, 160, drift=[0.001, 0.0], vol=0.01)


def test_variant_flags():
    assert [agent.PolicyVariant(v).has_critic for v in agent.VARIANTS] == [False, True, False, True]
    assert [agent.PolicyVariant(v).uses_gated_fusion for v in agent.VARIANTS] == [False, False, True, True]
    with pytest.raises(ParameterError):
        agent.PolicyVariant("XYZ")


def test_config_validation():
    with pytest.raises(ParameterError):
        agent.TrainConfig(gamma=1.5)
    with pytest.raises(ParameterError):
        agent.TrainConfig(kappa=0.0)
    with pytest.raises(ParameterError):
        agent.TrainConfig(update_interval=0)
    with pytest.raises(ParameterError):
        agent.TrainConfig(commission=0.5)


def test_dirichlet_logpdf_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(10):
        alpha = rng.uniform(0.3, 30.0, size=4)
        a = rng.dirichlet(alpha)
        assert agent.dirichlet_logpdf(a, alpha) == pytest.approx(stats.dirichlet.logpdf(a, alpha), rel=1e-10)


def test_concentration_floor():
    alpha = agent.concentration(np.array([1.0, 0.0]), 10.0)
    assert alpha.tolist() == [10.0, agent.ALPHA_FLOOR]


def test_sample_dirichlet_stays_strictly_positive():
    a = agent.sample_dirichlet(np.array([1e-6, 1e-6, 50.0]), np.random.default_rng(1))
    assert a.min() > 0 and a.sum() == pytest.approx(1.0)


def test_returns_and_td():
    assert agent.discounted_returns([1.0, 2.0, 3.0], 0.5).tolist() == [2.75, 3.5, 3.0]
    assert agent.td_error(1.0, 2.0, 4.0, 0.5) == 1.0
    with pytest.raises(SizeError):
        agent.discounted_returns([], 0.9)


@pytest.mark.parametrize("variant", agent.VARIANTS)
def test_network_parameters_and_routing(variant):
    net = agent.PolicyNetwork(variant, 3, 4, 6, rng=np.random.default_rng(0))
    names = set(net.params.names())
    v = agent.PolicyVariant(variant)
    assert ("W_concat" in names) != v.uses_gated_fusion
    assert ("W_critic" in names) == v.has_critic
    logits, values = net.forward(np.zeros((5, 12)), np.zeros((5, 3)))
    assert logits.shape == (5, 3)
    assert (values is None) != v.has_critic
    assert net.calls["gated_fusion" if v.uses_gated_fusion else "concat_fusion"] == 1
    with pytest.raises(SizeError):
        net.forward(np.zeros(11), np.zeros(3))


def test_zero_head_scale_starts_at_equal_weight():
    net = agent.PolicyNetwork("SBCA", 4, 3, 5, rng=np.random.default_rng(3), head_scale=0.0)
    rng = np.random.default_rng(4)
    w = agent.act_deterministic((rng.normal(size=12), rng.uniform(-1, 1, size=4)), net)
    assert np.allclose(w, 0.25)
    scaled = agent.PolicyNetwork("SBCA", 4, 3, 5, rng=np.random.default_rng(3), head_scale=1.0)
    assert np.array_equal(scaled.params["W_p"].data, net.params["W_p"].data)


def test_act_stochastic_log_density():
    net = agent.PolicyNetwork("SB", 2, 3, 4, rng=np.random.default_rng(0))
    state = (np.ones(6) * 0.1, np.zeros(2))
    a, logp = agent.act_stochastic(state, net, 20.0, np.random.default_rng(5))
    alpha = 20.0 * agent.act_deterministic(state, net)
    assert logp == pytest.approx(stats.dirichlet.logpdf(a, alpha))
    with pytest.raises(ParameterError):
        agent.act_stochastic(state, net, 0.0, np.random.default_rng(5))


def test_credit_split_accounts_for_every_reward(panel):
    cfg = agent.TrainConfig(gamma=0.0, **SMALL)
    net = agent.PolicyNetwork("SBA", 2, cfg.window, cfg.hidden, rng=np.random.default_rng(0))
    days = agent.decision_days(panel, "train", cfg.window)
    res = agent.training_pass(net, panel, days, FeatureScaler.from_panel(panel), cfg, np.random.default_rng(1))
    recs = res.rollout.records
    # with gamma = 0 the critic targets are exactly the (scaled) credited rewards
    expected = sum(r.reward for r in recs) - recs[0].holding_part - recs[-1].trading_part
    assert res.batch.targets.sum() == pytest.approx(cfg.reward_scale * expected, abs=1e-11)
    assert res.batch.targets.size == days.size - 1
    assert res.rollout.identity_gap() <= 1e-9


def test_policy_gradient_advantages_are_centred(panel):
    cfg = agent.TrainConfig(**SMALL)
    net = agent.PolicyNetwork("SBC", 2, cfg.window, cfg.hidden, rng=np.random.default_rng(0))
    days = agent.decision_days(panel, "train", cfg.window)[:20]
    res = agent.training_pass(net, panel, days, FeatureScaler.from_panel(panel), cfg, np.random.default_rng(1))
    assert res.batch.targets is None
    assert abs(res.batch.advantages.mean()) <= 1e-12


@pytest.mark.parametrize("variant", agent.VARIANTS)
def test_loss_gradient_matches_finite_differences(panel, variant):
    cfg = agent.TrainConfig(**SMALL)
    net = agent.PolicyNetwork(variant, 2, cfg.window, 4, rng=np.random.default_rng(7))
    days = agent.decision_days(panel, "train", cfg.window)[:6]
    res = agent.training_pass(net, panel, days, FeatureScaler.from_panel(panel), cfg, np.random.default_rng(2))
    batch = res.batch
    net.params.zero_grad()
    total, _, _ = agent.episode_loss(net, batch, cfg.kappa)
    nc.backward(total)
    analytic = net.params.flat_grad()
    theta = net.params.flat()
    h = 1e-5
    for i in range(theta.size):
        for sign, store in ((1, "p"), (-1, "m")):
            probe = theta.copy()
            probe[i] += sign * h
            net.params.set_flat(probe)
            val = float(agent.episode_loss(net, batch, cfg.kappa)[0].data)
            if store == "p":
                fp = val
            else:
                fm = val
        net.params.set_flat(theta)
        numeric = (fp - fm) / (2 * h)
        scale = max(abs(numeric), abs(analytic[i]), 1e-6)
        assert abs(numeric - analytic[i]) / scale <= 1e-4 or abs(numeric - analytic[i]) <= 1e-7


def test_training_is_deterministic(panel):
    cfg = agent.TrainConfig(**SMALL)
    a = agent.train(panel, "SBCA", cfg)
    b = agent.train(panel, "SBCA", cfg)
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert [e.val_pv for e in a.log.epochs] == [e.val_pv for e in b.log.epochs]
    assert sum(e.is_best for e in a.log.epochs) == 1


def test_derived_seeds_differ():
    a = np.random.default_rng(agent.derive_seed(42, "2assets", "SB")).random()
    b = np.random.default_rng(agent.derive_seed(42, "2assets", "SBA")).random()
    c = np.random.default_rng(agent.derive_seed(42, "2assets", "SB")).random()
    assert a != b and a == c


def test_monitor_sees_only_simplex_vectors(panel):
    seen = []

    def monitor(kind, w):
        seen.append(kind)
        assert abs(w.sum() - 1.0) <= 1e-9 and w.min() >= 0

    agent.SBCAAllocator("SBC", **SMALL).fit(panel, monitor=monitor)
    assert {"sampled", "smoothed", "deterministic"} <= set(seen)


def test_estimator_surface(panel, tmp_path):
    est = agent.SBCAAllocator("SB", **SMALL)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.predict(panel)
    est.fit(panel)
    weights = est.predict(panel, "test")
    assert np.allclose(weights.sum(axis=1), 1.0)
    assert est.score(panel) == pytest.approx(est.evaluate(panel, "val").portfolio_value)
    path = tmp_path / "ckpt.json"
    est.save(path)
    loaded = agent.SBCAAllocator.load(path)
    assert np.array_equal(loaded.predict(panel, "test"), weights)
    assert loaded.checkpoint_meta()["best_epoch"] is None
    with pytest.raises(TypeError):
        est.fit(np.zeros((3, 3)))
    with pytest.raises(SizeError):
        est.predict(panel.subset(["A1", "A0"]))


def test_evaluate_higher_commission_lowers_value(panel):
    est = agent.SBCAAllocator("SB", **SMALL).fit(panel)
    low = est.evaluate(panel, "test", commission=0.0).portfolio_value
    high = est.evaluate(panel, "test", commission=0.01).portfolio_value
    assert high < low


def test_decision_days_require_window(panel):
    days = agent.decision_days(panel, "train", 30)
    assert days[0] == 30
    with pytest.raises(RangeError):
        agent.decision_days(panel, "train", 500)


def test_train_log_csv(panel, tmp_path):
    result = agent.train(panel, "SBA", agent.TrainConfig(**SMALL))
    result.log.write_csv(tmp_path / "log.csv")
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert rows[0] == "epoch,actor_loss,critic_loss,val_pv,is_best"
    assert len(rows) == 1 + len(result.log.epochs)
    assert all(math.isfinite(e.actor_loss) for e in result.log.epochs)


def test_td_and_return_examples():
    assert agent.td_error(0.0, 1.0, 1.0, 0.99) == pytest.approx(-0.01)
    assert agent.td_error(0.01, 0.5, 0.52, 0.99) == pytest.approx(0.0248)
    assert agent.td_error(0.0, 0.3, 0.3, 1.0) == 0.0
    assert agent.discounted_returns([1, 1, 1], 0.5).tolist() == [1.75, 1.5, 1.0]
    assert agent.discounted_returns([0.2, -0.1], 0.0).tolist() == [0.2, -0.1]
    assert agent.discounted_returns([0, 0, 0], 0.9).tolist() == [0, 0, 0]


def test_uniform_dirichlet_marginal_is_uniform():
    rng = np.random.default_rng(0)
    draws = rng.dirichlet(agent.concentration(np.array([0.5, 0.5]), 2.0), size=100_000)[:, 0]
    assert draws.mean() == pytest.approx(0.5, abs=0.005)
    assert stats.kstest(draws, "uniform").pvalue > 1e-3


def test_dirichlet_density_peaks_at_the_mean():
    alpha = agent.concentration(np.array([0.3, 0.7]), 10.0)
    grid = np.linspace(0.01, 0.99, 99)
    dens = agent.dirichlet_logpdf(np.column_stack([grid, 1 - grid]), alpha)
    assert np.isfinite(dens).all()
    # mode (alpha_1 - 1) / (sum - 2) sits next to the mean for large concentration
    assert abs(grid[dens.argmax()] - 0.3) <= 0.05


def test_large_concentration_samples_collapse_to_the_mean():
    rng = np.random.default_rng(1)
    probs = np.array([0.2, 0.5, 0.3])
    draws = rng.dirichlet(agent.concentration(probs, 1e6), size=200)
    assert draws.std(axis=0).max() < 1e-3
    assert np.allclose(draws.mean(axis=0), probs, atol=1e-3)


def test_golden_weights():
    net = agent.PolicyNetwork("SBCA", 3, 4, 8, rng=np.random.default_rng(42))
    rng = np.random.default_rng(7)
    w = agent.act_deterministic((rng.normal(size=12), rng.uniform(-1, 1, size=3)), net)
    assert np.allclose(w, [0.3800278652836588, 0.3362057756640782, 0.28376635905226294], rtol=0, atol=1e-12)


def test_permuting_assets_permutes_weights():
    net = agent.PolicyNetwork("SBC", 3, 4, 8, rng=np.random.default_rng(0))
    rng = np.random.default_rng(2)
    state = (rng.normal(size=12), rng.uniform(-1, 1, size=3))
    base = agent.act_deterministic(state, net)
    perm = [2, 0, 1]
    net.params["W_actor"] = net.params["W_actor"].data[perm]
    net.params["b_actor"] = net.params["b_actor"].data[perm]
    assert np.allclose(agent.act_deterministic(state, net), base[perm])


def test_sb_and_sba_share_the_initial_representation(panel):
    cfg = agent.TrainConfig(**SMALL)
    # same construction as train(): the init stream is the first child of the run seed
    nets = [agent.PolicyNetwork(v, 2, cfg.window, cfg.hidden,
                                rng=np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0]))
            for v in ("SB", "SBA")]
    x = np.random.default_rng(4).normal(size=(5, 10))
    s = np.zeros((5, 2))
    h = [net.representation(x, s).data for net in nets]
    assert np.array_equal(h[0], h[1])


def test_variant_wiring_through_training(panel):
    for variant in agent.VARIANTS:
        result = agent.train(panel, variant, agent.TrainConfig(**SMALL))
        net = agent.PolicyNetwork(variant, 2, SMALL["window"], SMALL["hidden"], params=result.params)
        agent.evaluate(panel, "val", net, result.scaler, agent.TrainConfig(**SMALL))
        gated = agent.PolicyVariant(variant).uses_gated_fusion
        assert net.calls["gated_fusion" if gated else "concat_fusion"] > 0
        assert net.calls["concat_fusion" if gated else "gated_fusion"] == 0


def test_single_asset_degenerate_case():
    one = synth_generate(8, 1, 120, drift=0.0005, vol=0.01)
    cfg = agent.TrainConfig(gamma=0.0, lambda_risk=0.0, lambda_turnover=0.0, commission=0.0, **SMALL)
    result = agent.train(one, "SBCA", cfg)
    assert all(math.isfinite(e.actor_loss) and math.isfinite(e.critic_loss) for e in result.log.epochs)
    ev = agent.evaluate(one, "test", result.network, result.scaler, cfg)
    assert np.array_equal(ev.weights, np.ones_like(ev.weights))
    days = ev.days
    assert ev.portfolio_value == pytest.approx(one.closes[days[-1], 0] / one.closes[days[0] - 1, 0], rel=1e-12)


def test_uniform_policy_is_daily_equal_weight(panel):
    from sbca.evaluation import run_equal_weight

    cfg = agent.TrainConfig(**SMALL)
    net = agent.PolicyNetwork("SBA", 2, cfg.window, cfg.hidden, rng=np.random.default_rng(0), head_scale=0.0)
    scaler = FeatureScaler.from_panel(panel)
    a = agent.evaluate(panel, "test", net, scaler, cfg)
    b = agent.evaluate(panel, "test", net, scaler, cfg)
    assert np.array_equal(a.weights, b.weights)
    assert np.allclose(a.weights, 0.5)
    ew = run_equal_weight(panel, "test", cfg.cost, window=cfg.window)
    # identical weights; equal weight additionally pays for the trade back from drifted holdings
    assert a.portfolio_value >= ew.PV
    zero = agent.TrainConfig(commission=0.0, **SMALL)
    assert agent.evaluate(panel, "test", net, scaler, zero).portfolio_value == pytest.approx(
        run_equal_weight(panel, "test", zero.cost, window=cfg.window).PV, rel=1e-12)


def test_zero_rewards_give_zero_actor_gradient(panel):
    net = agent.PolicyNetwork("SB", 2, 5, 8, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    batch = agent.Batch(rng.normal(size=(6, 10)), np.zeros((6, 2)), rng.dirichlet([5, 5], size=6),
                        np.zeros(6), None)
    net.params.zero_grad()
    nc.backward(agent.episode_loss(net, batch, 50.0)[0])
    assert not net.params.flat_grad().any()
    constant = agent.discounted_returns(np.full(6, 0.01), 0.0)
    assert not (constant - constant.mean()).any()


def test_critic_loss_falls_on_a_linear_value_task():
    rng = np.random.default_rng(0)
    net = agent.PolicyNetwork("SBA", 2, 3, 8, rng=rng)
    x = rng.normal(size=(64, 6))
    s = np.zeros((64, 2))
    target = x @ rng.normal(size=6) * 0.1
    actions = np.full((64, 2), 0.5)
    opt = nc.AdamW(net.params, lr=1e-2)
    actor = net.params["W_actor"].data.copy()
    losses = []
    for _ in range(50):
        net.params.zero_grad()
        _, _, critic = agent.episode_loss(net, agent.Batch(x, s, actions, np.zeros(64), target), 50.0)
        nc.backward(critic)
        opt.step()
        losses.append(float(critic.data))
    assert losses[-1] < 0.1 * losses[0]
    assert np.allclose(net.params["W_actor"].data, actor * (1 - 1e-2 * 1e-5) ** 50)
