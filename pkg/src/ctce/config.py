"""Run configuration: one YAML document resolving scenario, model, training and experiment settings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .metrics import EvalConfig
from .model import ModelConfig
from .numerics import ConfigError
from .scenario import ScenarioConfig, ScenarioError, load_scenario_config
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    scenario_path: str | None = None
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    n_train: int = 200
    n_test: int = 50
    train_seed: int = 1
    test_seed: int = 2
    pdr: float = 0.0
    pdr_list: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    variant: str = "ctce"
    ablation_k2: tuple[int, ...] = (1, 2, 4)
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> None:
        if self.scenario_path is not None and not Path(self.scenario_path).exists():
            raise ConfigError(f"scenario file {self.scenario_path} does not exist")
        if self.n_train < 0 or self.n_test <= 0:
            raise ConfigError("n_train must be >= 0 and n_test > 0")
        for p in (self.pdr, *self.pdr_list):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"pdr {p} outside [0, 1]")
        if self.variant not in ("ctce", "no_mar", "no_coop"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if any(k <= 0 for k in self.ablation_k2):
            raise ConfigError("ablation_k2 entries must be positive")
        try:
            self.scenario.validate()
        except ScenarioError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            if d.get("scenario_path"):
                kw["scenario"] = load_scenario_config(d["scenario_path"])
            if "scenario" in d and d["scenario"] is not None:
                base = kw.get("scenario", ScenarioConfig()).to_dict()
                base.update(d["scenario"])
                kw["scenario"] = ScenarioConfig.from_dict(base)
            if "model" in d:
                kw["model"] = ModelConfig.from_dict({**ModelConfig().to_dict(), **(d["model"] or {})})
            if "train" in d:
                tr = {**TrainConfig().to_dict(), **(d["train"] or {})}
                unknown = set(tr) - {f.name for f in fields(TrainConfig)}
                if unknown:
                    raise ConfigError(f"unknown train keys: {sorted(unknown)}")
                tr["betas"] = tuple(tr["betas"])
                kw["train"] = TrainConfig(**tr)
        except (ScenarioError, ValueError, TypeError, FileNotFoundError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        for k, v in d.items():
            if k in ("scenario", "model", "train"):
                continue
            kw[k] = tuple(v) if isinstance(v, list) else v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    """sha256 over canonical JSON (sorted keys, no whitespace); output paths excluded."""
    d = {k: v for k, v in d.items() if k != "out"}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load_run_config(path: str | Path) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def dump_run_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def eval_config() -> EvalConfig:
    return EvalConfig()
