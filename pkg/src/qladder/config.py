"""Run configuration: JSON file plus command-line overrides, resolved once."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .domain import METRICS, RewardWeights
from .predictors import DEFAULT_GRID, TARGETS, EnsembleParams, default_params
from .qnet import DqnConfig
from .reward import PenaltyPolicy

BASELINE_SOURCES = ("predicted", "measured")
EVAL_SPLITS = ("test", "all")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class RunConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    metric: str = "xpsnr"
    weights: list = field(default_factory=lambda: [0.8, 0.6, 0.1])
    penalty: str = "fixed"
    resolution_range: float = 1800.0
    noise: list = field(default_factory=lambda: [0.0, 0.1, 0.2])
    tau_l: float = 16.0
    alpha: float = 0.75
    test_fraction: float = 0.3
    split_seed: int = 42
    eval_split: str = "test"
    baseline_source: str = "predicted"
    segments: int = 20
    bitrate_scale: float = 1.0
    time_scale: float = 1.0
    sweep_folds: int = 5
    sweep_grid: Optional[list] = None
    dqn: dict = field(default_factory=dict)
    predictor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.eval_split not in EVAL_SPLITS:
            raise ConfigError(f"eval_split must be one of {EVAL_SPLITS}")
        if self.baseline_source not in BASELINE_SOURCES:
            raise ConfigError(f"baseline_source must be one of {BASELINE_SOURCES}")
        if any(n < 0 for n in self.noise):
            raise ConfigError("noise levels must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.segments < 1:
            raise ConfigError("segments must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.sweep_folds < 2:
            raise ConfigError("sweep_folds must be >= 2")
        if self.sweep_grid is not None:
            if not self.sweep_grid:
                raise ConfigError("sweep_grid must not be empty")
            for cand in self.sweep_grid:
                try:
                    EnsembleParams(**cand)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"sweep_grid: {exc}") from None
        unknown = set(self.predictor) - set(TARGETS)
        if unknown:
            raise ConfigError(f"unknown predictor targets {sorted(unknown)}")
        # build once so bad values fail here rather than mid-run
        self.reward_weights
        self.penalty_policy
        self.dqn_config
        self.predictor_params

    @property
    def reward_weights(self) -> RewardWeights:
        try:
            return RewardWeights(*self.weights)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"weights: {exc}") from None

    @property
    def penalty_policy(self) -> PenaltyPolicy:
        try:
            return PenaltyPolicy(self.penalty, self.resolution_range)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def dqn_config(self) -> DqnConfig:
        try:
            return DqnConfig(**self.dqn)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dqn: {exc}") from None

    @property
    def predictor_params(self) -> dict:
        out = {}
        for target in TARGETS:
            base = asdict(default_params(target))
            try:
                out[target] = EnsembleParams(**{**base, **self.predictor.get(target, {})})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"predictor.{target}: {exc}") from None
        return out

    @property
    def search_grid(self) -> list:
        return [dict(c) for c in (self.sweep_grid if self.sweep_grid is not None else DEFAULT_GRID)]

    def resolved(self) -> dict:
        """Every setting with defaults filled in, as written beside outputs."""
        d = asdict(self)
        d["dqn"] = asdict(self.dqn_config)
        d["dqn"]["hidden"] = list(d["dqn"]["hidden"])
        d["predictor"] = {t: asdict(p) for t, p in self.predictor_params.items()}
        d["sweep_grid"] = self.search_grid
        return d

    def snapshot(self) -> str:
        return json.dumps(self.resolved(), indent=1, sort_keys=True) + "\n"


def load_config(path: Optional[str] = None, **overrides) -> RunConfig:
    """Read a JSON config (optional) and apply non-None overrides on top."""
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
