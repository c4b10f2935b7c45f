"""Strict TOML run configuration.

Every section maps onto one frozen dataclass; unknown sections or keys are
rejected by name. A single root ``seed`` feeds data generation and training.

    seed = 0
    workers = 1

    [synth]      # SynthConfig fields except seed
    [train]      # epochs, batch_size, lr, weight_decay, coverage_threshold
    [model]      # ModelConfig fields except use_time
    [weights]    # LossWeights (maxima of the curriculum)
    [augment]    # AugmentConfig
    [eval]       # tau, tau_sweep, n_resamples, probe_mode, probe_steps
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import ModelConfig
from .objectives import AugmentConfig, LossWeights
from .synthgen import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    tau: float = 1.0
    tau_sweep: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    n_resamples: int = 10_000
    probe_mode: str = "auto"  # "auto", "discrete" or "tertile"
    probe_steps: int = 500

    def __post_init__(self):
        if self.tau < 0 or any(t < 0 for t in self.tau_sweep):
            raise ValueError("tau values must be non-negative")
        if self.n_resamples < 1:
            raise ValueError("n_resamples must be positive")
        if self.probe_mode not in ("auto", "discrete", "tertile"):
            raise ValueError(f"probe_mode must be auto, discrete or tertile, got {self.probe_mode!r}")


_TRAIN_KEYS = ("epochs", "batch_size", "lr", "weight_decay", "coverage_threshold")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.synth.seed != self.seed:
            object.__setattr__(self, "synth", replace(self.synth, seed=self.seed))
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    def train_config(self, use_time: bool) -> TrainConfig:
        return replace(self.train, use_time=use_time)

    def to_dict(self) -> dict:
        """Round-trippable through :func:`config_from_dict`."""
        train = asdict(self.train)
        model = train.pop("model")
        model.pop("use_time")
        return {
            "seed": self.seed,
            "workers": self.workers,
            "synth": {k: v for k, v in asdict(self.synth).items() if k != "seed"},
            "train": {k: train[k] for k in _TRAIN_KEYS},
            "model": model,
            "weights": train["weights"],
            "augment": train["augment"],
            "eval": asdict(self.eval),
        }


def _section(cls, raw: Any, name: str, skip: tuple[str, ...] = ()) -> dict:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    out = {}
    for k, v in raw.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    allowed = {"seed", "workers", "synth", "train", "model", "weights", "augment", "eval"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    try:
        seed = int(raw.get("seed", 0))
        synth = SynthConfig(**_section(SynthConfig, raw.get("synth", {}), "synth", ("seed",)), seed=seed)
        train_raw = raw.get("train", {})
        if not isinstance(train_raw, Mapping):
            raise ConfigError("[train] must be a table")
        unknown = sorted(set(train_raw) - set(_TRAIN_KEYS))
        if unknown:
            raise ConfigError(f"unknown key(s) in [train]: {', '.join(unknown)}")
        model = ModelConfig(**_section(ModelConfig, raw.get("model", {}), "model", ("use_time",)))
        weights = LossWeights(**_section(LossWeights, raw.get("weights", {}), "weights"))
        augment = AugmentConfig(**_section(AugmentConfig, raw.get("augment", {}), "augment"))
        train = TrainConfig(**dict(train_raw), seed=seed, weights=weights, augment=augment, model=model)
        ev = EvalConfig(**_section(EvalConfig, raw.get("eval", {}), "eval"))
        return RunConfig(seed=seed, workers=int(raw.get("workers", 1)), synth=synth, train=train, eval=ev)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)
