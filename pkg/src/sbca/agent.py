"""Policy variants, the Dirichlet training policy and the actor-critic training loop."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import netcore as nc
from .dataio import FeatureScaler, PanelDataset, StateVector, build_states
from .env import CostModel, EnvState, InsolvencyError, RewardParams, Rollout, ema_smooth, step, uniform_weights
from .errors import NumericError, ParameterError, RangeError, SizeError, TrainingError

logger = logging.getLogger(__name__)

VARIANTS = ("SB", "SBA", "SBC", "SBCA")
ALPHA_FLOOR = 1e-6
SAMPLE_FLOOR = 1e-300


@dataclass(frozen=True)
class PolicyVariant:
    tag: str

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ParameterError(f"unknown variant {self.tag!r}; expected one of {VARIANTS}")

    @property
    def has_critic(self) -> bool:
        return self.tag in ("SBA", "SBCA")

    @property
    def uses_gated_fusion(self) -> bool:
        return self.tag in ("SBC", "SBCA")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    lr: float = 3e-4
    weight_decay: float = 1e-5
    max_epochs: int = 30
    kappa: float = 20.0
    patience: int = 5
    seed: int = 42
    ema_alpha: float = 0.4
    lambda_risk: float = 0.1
    lambda_turnover: float = 0.005
    commission: float = 0.0025
    window: int = 30
    hidden: int = 64
    rf_annual: float = 0.02
    grad_clip: float = 5.0
    insolvency_reward: float = -10.0
    update_interval: int = 8
    head_scale: float = 0.0
    reward_scale: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError("gamma must lie in [0, 1]")
        if self.kappa <= 0:
            raise ParameterError("kappa must be positive")
        if self.max_epochs < 1 or self.patience < 1:
            raise ParameterError("max_epochs and patience must be >= 1")
        if self.update_interval < 1:
            raise ParameterError("update_interval must be >= 1")
        if self.window < 1 or self.hidden < 1:
            raise ParameterError("window and hidden must be >= 1")
        CostModel(self.commission)
        RewardParams(self.lambda_risk, self.lambda_turnover)

    @property
    def cost(self) -> CostModel:
        return CostModel(self.commission)

    @property
    def reward_params(self) -> RewardParams:
        return RewardParams(self.lambda_risk, self.lambda_turnover)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# network


class PolicyNetwork:
    """Shared representation with a softmax actor head and (optionally) a scalar critic head.

    SB/SBA build the representation with the affine concat map; SBC/SBCA with
    the two encoders and gated fusion.
    """

    def __init__(self, variant: PolicyVariant | str, n_assets: int, window: int, hidden: int,
                 params: nc.ParamSet | None = None, rng: np.random.Generator | None = None,
                 head_scale: float = 1.0):
        self.head_scale = head_scale
        self.variant = variant if isinstance(variant, PolicyVariant) else PolicyVariant(variant)
        self.n_assets = n_assets
        self.window = window
        self.hidden = hidden
        self.fusion = nc.FusionConfig(hidden=hidden, fusion_mode="gated" if self.variant.uses_gated_fusion else "concat")
        self.calls: Counter = Counter()
        self.params = params if params is not None else self._init_params(rng or np.random.default_rng(0))

    def _init_params(self, rng: np.random.Generator) -> nc.ParamSet:
        n_price, n_text, H, N = self.window * self.n_assets, self.n_assets, self.hidden, self.n_assets
        arrays: dict[str, np.ndarray] = {}
        if self.variant.uses_gated_fusion:
            for tag, fan_in in (("p", n_price), ("s", n_text)):
                arrays[f"W_{tag}"] = nc.init_uniform(rng, H, fan_in)
                arrays[f"b_{tag}"] = np.zeros(H)
                arrays[f"gamma_{tag}"] = np.ones(H)
                arrays[f"beta_{tag}"] = np.zeros(H)
            arrays["W_g"] = nc.init_uniform(rng, H, H)
            arrays["b_g"] = np.zeros(H)
            arrays["W_f"] = nc.init_uniform(rng, H, H)
            arrays["b_f"] = np.zeros(H)
        else:
            arrays["W_concat"] = nc.init_uniform(rng, H, n_price + n_text)
            arrays["b_concat"] = np.zeros(H)
        # heads draw from the same stream at any scale so the representation init is unchanged
        arrays["W_actor"] = self.head_scale * nc.init_uniform(rng, N, H)
        arrays["b_actor"] = np.zeros(N)
        if self.variant.has_critic:
            arrays["W_critic"] = self.head_scale * nc.init_uniform(rng, 1, H)
            arrays["b_critic"] = np.zeros(1)
        return nc.ParamSet(arrays)

    def representation(self, price, text) -> nc.Value:
        price = np.asarray(price, dtype=np.float64)
        text = np.asarray(text, dtype=np.float64)
        if price.shape[-1] != self.window * self.n_assets or text.shape[-1] != self.n_assets:
            raise SizeError(f"state blocks {price.shape}/{text.shape} do not match W={self.window}, N={self.n_assets}")
        if self.variant.uses_gated_fusion:
            self.calls["gated_fusion"] += 1
            f_p = nc.encode_price(self.params, price, self.fusion)
            f_s = nc.encode_text(self.params, text, self.fusion)
            return nc.gated_fusion(self.params, f_p, f_s)
        self.calls["concat_fusion"] += 1
        return nc.concat_fusion(self.params, price, text)

    def actor_logits(self, h: nc.Value) -> nc.Value:
        return nc.affine(self.params["W_actor"], self.params["b_actor"], h)

    def critic_value(self, h: nc.Value) -> nc.Value:
        if not self.variant.has_critic:
            raise ParameterError(f"variant {self.variant.tag} has no critic")
        return nc.affine(self.params["W_critic"], self.params["b_critic"], h)

    def forward(self, price, text) -> tuple[np.ndarray, np.ndarray | None]:
        """Numeric forward pass: ``(logits, values)``; ``values`` is None without a critic."""
        h = self.representation(price, text)
        logits = self.actor_logits(h).data
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite actor logits")
        values = self.critic_value(h).data[..., 0] if self.variant.has_critic else None
        return logits, values


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _state_arrays(state) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(state, StateVector):
        return state.price_block, state.text_block
    return state


def act_deterministic(state, net: PolicyNetwork) -> np.ndarray:
    """Softmax weights for one state (before EMA smoothing)."""
    price, text = _state_arrays(state)
    if not (np.all(np.isfinite(price)) and np.all(np.isfinite(text))):
        raise NumericError("non-finite state")
    logits, _ = net.forward(price, text)
    return _softmax(logits)


def concentration(probs: np.ndarray, kappa: float) -> np.ndarray:
    alpha = kappa * np.asarray(probs)
    if np.any(alpha < ALPHA_FLOOR):
        logger.warning("Dirichlet concentration below %g clamped", ALPHA_FLOOR)
        alpha = np.maximum(alpha, ALPHA_FLOOR)
    return alpha


def dirichlet_logpdf(a: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    a, alpha = np.asarray(a), np.asarray(alpha)
    return (special.gammaln(alpha.sum(axis=-1)) - special.gammaln(alpha).sum(axis=-1)
            + ((alpha - 1.0) * np.log(a)).sum(axis=-1))


def sample_dirichlet(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a = rng.dirichlet(alpha)
    if a.min() < SAMPLE_FLOOR:
        # keeps ln(a) finite when a tiny concentration underflows to an exact zero
        a = np.maximum(a, SAMPLE_FLOOR)
        a = a / a.sum()
    return a


def act_stochastic(state, net: PolicyNetwork, kappa: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Draw weights from Dirichlet(kappa * softmax(logits)); returns ``(weights, log_density)``."""
    if kappa <= 0:
        raise ParameterError("kappa must be positive")
    alpha = concentration(act_deterministic(state, net), kappa)
    a = sample_dirichlet(alpha, rng)
    return a, float(dirichlet_logpdf(a, alpha))


def td_error(r: float, v_now: float, v_next: float, gamma: float) -> float:
    return r + gamma * v_next - v_now


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise SizeError("discounted_returns needs at least one reward")
    out = np.empty_like(rewards)
    running = 0.0
    for t in range(rewards.size - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


# ---------------------------------------------------------------------------
# episodes


def decision_days(panel: PanelDataset, split: str, window: int) -> np.ndarray:
    days = panel.split_days(split)
    days = days[days >= max(window, 1)]
    if days.size == 0:
        raise RangeError(f"split {split!r} has no day with {window} prior returns")
    return days


@dataclass
class Batch:
    """Frozen inputs of the training loss for a set of decisions."""

    price: np.ndarray
    text: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray | None


Monitor = Callable[[str, np.ndarray], None]


def segment_batch(net: PolicyNetwork, price: np.ndarray, text: np.ndarray, actions: np.ndarray,
                  credited: np.ndarray, next_price: np.ndarray, next_text: np.ndarray,
                  terminal: np.ndarray, gamma: float) -> Batch:
    """Advantages for a run of decisions under the current parameters.

    Critic variants use the one-step TD error; the others use discounted
    returns within the run minus their mean.
    """
    if net.variant.has_critic:
        _, v_now = net.forward(price, text)
        _, v_next = net.forward(next_price, next_text)
        targets = credited + gamma * np.where(terminal, 0.0, v_next)
        return Batch(price, text, actions, targets - v_now, targets)
    g = discounted_returns(credited, gamma)
    return Batch(price, text, actions, g - g.mean(), None)


@dataclass
class PassResult:
    rollout: Rollout
    truncated: bool
    actor_losses: list[float]
    critic_losses: list[float]
    batch: Batch | None = None


def training_pass(net: PolicyNetwork, panel: PanelDataset, days: np.ndarray, scaler: FeatureScaler,
                  cfg: TrainConfig, rng: np.random.Generator, optimizer: nc.AdamW | None = None,
                  monitor: Monitor | None = None) -> PassResult:
    """One stochastic pass over ``days``, updating every ``cfg.update_interval`` credited decisions.

    Each env reward is split between the two decisions it depends on: the
    trade cost and turnover penalty of step ``k`` go to decision ``k``, the log
    gross return and risk penalty of step ``k + 1`` go to decision ``k`` as
    well, since its weights earned them.  Without an optimizer nothing is
    updated and the whole pass is returned as a single :class:`Batch`.
    """
    price, text = build_states(panel, scaler, days, cfg.window)
    n_days, n_assets = len(days), panel.n_assets
    actions = np.empty((n_days, n_assets))
    credited = np.empty(n_days)
    terminal = np.zeros(n_days, dtype=bool)
    cost, params = cfg.cost, cfg.reward_params
    state = EnvState.initial(n_assets)
    records: list = []
    ready: list[int] = []
    actor_losses: list[float] = []
    critic_losses: list[float] = []

    def update(idx: list[int]) -> None:
        idx = np.asarray(idx)
        batch = segment_batch(net, price[idx], text[idx], actions[idx], cfg.reward_scale * credited[idx],
                              price[idx + 1], text[idx + 1], terminal[idx], cfg.gamma)
        net.params.zero_grad()
        total, actor_loss, critic_loss = episode_loss(net, batch, cfg.kappa)
        if not np.isfinite(total.data):
            raise TrainingError("non-finite training loss", {
                "decisions": idx.tolist(), "actor_loss": float(actor_loss.data),
                "critic_loss": None if critic_loss is None else float(critic_loss.data)})
        nc.backward(total)
        nc.clip_grad_norm(net.params, cfg.grad_clip)
        optimizer.step()
        actor_losses.append(float(actor_loss.data))
        if critic_loss is not None:
            critic_losses.append(float(critic_loss.data))

    truncated = False
    for k, d in enumerate(days):
        logits, _ = net.forward(price[k], text[k])
        a = sample_dirichlet(concentration(_softmax(logits), cfg.kappa), rng)
        w = ema_smooth(a, state.prev_weights, cfg.ema_alpha)
        if monitor is not None:
            monitor("sampled", a)
            monitor("smoothed", w)
        try:
            state, rec = step(state, w, panel.gross_return(int(d)), cost, params)
        except InsolvencyError as exc:
            logger.warning("training rollout insolvent at step %d; truncating", exc.step)
            truncated = True
            if k >= 1:
                credited[k - 1] += cfg.insolvency_reward
                terminal[k - 1] = True
                ready.append(k - 1)
            break
        records.append(rec)
        actions[k] = a
        credited[k] = rec.trading_part
        if k >= 1:
            credited[k - 1] += rec.holding_part
            ready.append(k - 1)
        if optimizer is not None and len(ready) >= cfg.update_interval:
            update(ready)
            ready = []

    result = PassResult(Rollout(records, state.net_value), truncated, actor_losses, critic_losses)
    if optimizer is not None:
        if ready:
            update(ready)
    elif ready:
        idx = np.asarray(ready)
        result.batch = segment_batch(net, price[idx], text[idx], actions[idx], cfg.reward_scale * credited[idx],
                                     price[idx + 1], text[idx + 1], terminal[idx], cfg.gamma)
    return result


def episode_loss(net: PolicyNetwork, batch: Batch, kappa: float) -> tuple[nc.Value, nc.Value, nc.Value | None]:
    """``(total, actor_loss, critic_loss)`` with advantages and targets held constant."""
    h = net.representation(batch.price, batch.text)
    probs = nc.softmax(net.actor_logits(h))
    alpha = nc.clamp_min(probs * kappa, ALPHA_FLOOR)
    log_pi = (nc.gammaln(nc.sum_(alpha, axis=-1)) - nc.sum_(nc.gammaln(alpha), axis=-1)
              + nc.sum_((alpha - 1.0) * np.log(batch.actions), axis=-1))
    actor_loss = -nc.sum_(log_pi * batch.advantages)
    if batch.targets is None:
        return actor_loss, actor_loss, None
    residual = net.critic_value(h) - batch.targets[:, None]
    critic_loss = nc.mean(residual * residual)
    return actor_loss + critic_loss, actor_loss, critic_loss


@dataclass
class Evaluation:
    days: np.ndarray
    raw_weights: np.ndarray
    rollout: Rollout

    @property
    def weights(self) -> np.ndarray:
        return self.rollout.weights

    @property
    def portfolio_value(self) -> float:
        return self.rollout.terminal_value


def evaluate(panel: PanelDataset, split: str, net: PolicyNetwork, scaler: FeatureScaler,
             cfg: TrainConfig, cost: CostModel | None = None, monitor: Monitor | None = None) -> Evaluation:
    """Deterministic rollout (softmax weights, then EMA) over ``split``."""
    days = decision_days(panel, split, cfg.window)
    price, text = build_states(panel, scaler, days, cfg.window)
    logits, _ = net.forward(price, text)
    raw = _softmax(logits)
    cost = cost or cfg.cost
    params = cfg.reward_params
    state = EnvState.initial(panel.n_assets)
    records = []
    for k, d in enumerate(days):
        w = ema_smooth(raw[k], state.prev_weights, cfg.ema_alpha)
        if monitor is not None:
            monitor("deterministic", raw[k])
            monitor("smoothed", w)
        state, rec = step(state, w, panel.gross_return(int(d)), cost, params)
        records.append(rec)
    return Evaluation(days, raw, Rollout(records, state.net_value))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    actor_loss: float
    critic_loss: float | None
    val_pv: float
    is_best: bool = False


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return max(self.epochs, key=lambda e: e.val_pv).epoch

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "actor_loss", "critic_loss", "val_pv", "is_best"])
            for e in self.epochs:
                out.writerow([e.epoch, repr(e.actor_loss), "" if e.critic_loss is None else repr(e.critic_loss),
                              repr(e.val_pv), int(e.is_best)])


@dataclass
class TrainResult:
    params: nc.ParamSet
    log: TrainLog
    scaler: FeatureScaler
    network: PolicyNetwork


def derive_seed(seed: int, *labels: str) -> np.random.SeedSequence:
    """Independent PRNG stream per (seed, label...) cell."""
    return np.random.SeedSequence(seed, spawn_key=tuple(zlib.crc32(label.encode()) for label in labels))


def train(panel: PanelDataset, variant: PolicyVariant | str, config: TrainConfig = TrainConfig(),
          seed_seq: np.random.SeedSequence | None = None, monitor: Monitor | None = None) -> TrainResult:
    """Actor-critic / policy-gradient training with early stopping on validation PV."""
    variant = variant if isinstance(variant, PolicyVariant) else PolicyVariant(variant)
    seed_seq = seed_seq or np.random.SeedSequence(config.seed)
    init_ss, sample_ss = seed_seq.spawn(2)
    scaler = FeatureScaler.from_panel(panel)
    net = PolicyNetwork(variant, panel.n_assets, config.window, config.hidden, rng=np.random.default_rng(init_ss),
                        head_scale=config.head_scale)
    opt = nc.AdamW(net.params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(sample_ss)
    train_days = decision_days(panel, "train", config.window)
    decision_days(panel, "val", config.window)

    log = TrainLog()
    best_pv, best_params, stale = -math.inf, net.params.copy(), 0
    for epoch in range(config.max_epochs):
        result = training_pass(net, panel, train_days, scaler, config, rng, opt, monitor)
        if not result.actor_losses:
            raise TrainingError("training pass produced no update", {"epoch": epoch})
        actor_loss = float(np.mean(result.actor_losses))
        critic_loss = float(np.mean(result.critic_losses)) if result.critic_losses else None

        try:
            val_pv = evaluate(panel, "val", net, scaler, config, monitor=monitor).portfolio_value
        except InsolvencyError:
            val_pv = 0.0
        log.epochs.append(EpochLog(epoch, actor_loss, critic_loss, val_pv))
        logger.info("%s epoch %d: actor %.6g val_pv %.6f", variant.tag, epoch, actor_loss, val_pv)
        if val_pv > best_pv:
            best_pv, best_params, stale = val_pv, net.params.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    log.epochs[log.best_epoch].is_best = True
    best_net = PolicyNetwork(variant, panel.n_assets, config.window, config.hidden, params=best_params)
    return TrainResult(best_params, log, scaler, best_net)


# ---------------------------------------------------------------------------
# estimator facade


class SBCAAllocator(BaseEstimator):
    """Portfolio allocator with the usual ``fit`` / ``predict`` / ``score`` surface.

    ``fit`` takes a split-tagged :class:`PanelDataset`; ``predict`` returns the
    EMA-smoothed weights over one split and ``score`` the terminal portfolio
    value there.
    """

    def __init__(self, variant="SBCA", gamma=0.99, lr=3e-4, weight_decay=1e-5, max_epochs=30, kappa=20.0,
                 patience=5, seed=42, ema_alpha=0.4, lambda_risk=0.1, lambda_turnover=0.005, commission=0.0025,
                 window=30, hidden=64, rf_annual=0.02, grad_clip=5.0, insolvency_reward=-10.0, update_interval=8,
                 head_scale=0.0, reward_scale=10.0):
        self.variant = variant
        self.gamma = gamma
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.kappa = kappa
        self.patience = patience
        self.seed = seed
        self.ema_alpha = ema_alpha
        self.lambda_risk = lambda_risk
        self.lambda_turnover = lambda_turnover
        self.commission = commission
        self.window = window
        self.hidden = hidden
        self.rf_annual = rf_annual
        self.grad_clip = grad_clip
        self.insolvency_reward = insolvency_reward
        self.update_interval = update_interval
        self.head_scale = head_scale
        self.reward_scale = reward_scale

    def _config(self) -> TrainConfig:
        params = self.get_params()
        return TrainConfig(**{k: params[k] for k in TrainConfig.field_names()})

    @staticmethod
    def _check_panel(X) -> PanelDataset:
        if not isinstance(X, PanelDataset):
            raise TypeError(f"expected a PanelDataset, got {type(X).__name__}")
        if X.split is None:
            raise RangeError("panel must carry split tags")
        return X

    def fit(self, X, y=None, monitor: Monitor | None = None):
        X = self._check_panel(X)
        result = train(X, self.variant, self._config(), monitor=monitor)
        self.network_ = result.network
        self.scaler_ = result.scaler
        self.train_log_ = result.log
        self.tickers_ = X.tickers
        self.n_features_in_ = X.n_assets
        return self

    def evaluate(self, X, split: str = "test", commission: float | None = None) -> Evaluation:
        check_is_fitted(self, ("network_", "scaler_"))
        X = self._check_panel(X)
        if X.tickers != self.tickers_:
            raise SizeError(f"panel tickers {X.tickers} differ from fitted {self.tickers_}")
        cost = None if commission is None else CostModel(commission)
        return evaluate(X, split, self.network_, self.scaler_, self._config(), cost=cost)

    def predict(self, X, split: str = "test") -> np.ndarray:
        return self.evaluate(X, split).weights

    def score(self, X, y=None, split: str = "val") -> float:
        return self.evaluate(X, split).portfolio_value

    def checkpoint_meta(self) -> dict:
        check_is_fitted(self, ("network_", "scaler_"))
        return {
            "variant": self.network_.variant.tag,
            "tickers": list(self.tickers_),
            "config": asdict(self._config()),
            "scaler_mean": self.scaler_.mean_.tolist(),
            "scaler_std": self.scaler_.std_.tolist(),
            "best_epoch": None if self.train_log_ is None else self.train_log_.best_epoch,
        }

    def save(self, path) -> None:
        nc.save_checkpoint(path, self.network_.params, self.checkpoint_meta())

    @classmethod
    def load(cls, path) -> "SBCAAllocator":
        params, meta = nc.load_checkpoint(path)
        est = cls(variant=meta["variant"], **meta["config"])
        cfg = est._config()
        est.tickers_ = tuple(meta["tickers"])
        est.n_features_in_ = len(est.tickers_)
        est.scaler_ = FeatureScaler()
        est.scaler_.mean_ = np.asarray(meta["scaler_mean"])
        est.scaler_.std_ = np.asarray(meta["scaler_std"])
        est.network_ = PolicyNetwork(meta["variant"], len(est.tickers_), cfg.window, cfg.hidden, params=params)
        est.train_log_ = None
        return est
