"""Experiment configuration: flat JSON document, defaults, env and flag overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .agent import VARIANTS, TrainConfig
from .errors import ParameterError, SchemaError
from .evaluation import COMMISSIONS

DEFAULT_TICKERS = ("NVDA", "GS", "CAT", "KO", "MRK", "GILD")
DEFAULT_GROUPS = {
    "2assets": ["NVDA", "GS"],
    "4assets": ["NVDA", "GS", "CAT", "KO"],
    "6assets": list(DEFAULT_TICKERS),
}
SEED_ENV = "SBCA_SEED"


@dataclass(frozen=True)
class ExperimentConfig:
    prices: str | None = None
    news: str | None = None
    index: str | None = None
    out_dir: str = "runs"
    groups: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GROUPS.items()})
    boundaries: tuple = ("2018-12-31", "2020-12-31")
    variants: tuple = VARIANTS
    commissions: tuple = COMMISSIONS
    # synthetic mode
    synthetic: bool = False
    synth_days: int = 2870
    synth_drift: float = 0.0003
    synth_vol: float = 0.015
    # training hyperparameters, mirrored from TrainConfig
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
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ParameterError(f"unknown variants {unknown}")
        if len(self.boundaries) != 2:
            raise ParameterError("boundaries must hold two dates")
        if not self.groups or any(not members for members in self.groups.values()):
            raise ParameterError("every asset group needs at least one ticker")
        self.train_config()  # validates the shared hyperparameters

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{name: getattr(self, name) for name in TrainConfig.field_names()})

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["boundaries"] = list(self.boundaries)
        payload["variants"] = list(self.variants)
        payload["commissions"] = list(self.commissions)
        return payload

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **_coerce(overrides))


def _coerce(values: dict) -> dict:
    names = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise SchemaError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(values)
    for key in ("boundaries", "variants", "commissions"):
        if key in out:
            out[key] = tuple(out[key])
    return out


def load_config(path=None, env=None, **overrides) -> ExperimentConfig:
    """Defaults, then the JSON file, then ``SBCA_SEED``, then explicit overrides."""
    env = os.environ if env is None else env
    values: dict = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise SchemaError(f"{path}: config must be a JSON object")
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ParameterError(f"{SEED_ENV} must be an integer") from exc
    cfg = ExperimentConfig(**_coerce(values))
    return cfg.with_overrides(**overrides)
