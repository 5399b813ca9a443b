import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .constants import EPOCHS_2D, EPOCHS_3D
from .model import ConfigError, ModelConfig
from .pipeline import MODES
from .synth import ScenarioConfig
from .training import TrainConfig

PATH_KEYS = ("dataset", "out", "checkpoint", "scores", "validation")


@dataclass
class RunConfig:
    """File and command-line values; sections stay partial until resolved against the mode."""

    mode: str = "3d"
    model: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    scenario: dict[str, Any] = field(default_factory=dict)
    paths: dict[str, str] = field(default_factory=dict)

    def model_config(self, **derived) -> ModelConfig:
        try:
            return ModelConfig.from_dict({**self.model, **derived})
        except TypeError as exc:
            raise ConfigError(f"Invalid model config: {exc}") from None

    def train_config(self) -> TrainConfig:
        defaults = {"epochs": EPOCHS_2D if self.mode == "2d" else EPOCHS_3D}
        try:
            return TrainConfig.from_dict({**defaults, **self.train})
        except TypeError as exc:
            raise ConfigError(f"Invalid train config: {exc}") from None

    def scenario_config(self) -> ScenarioConfig:
        try:
            return ScenarioConfig.from_dict({"mode": self.mode, **self.scenario})
        except TypeError as exc:
            raise ConfigError(f"Invalid scenario config: {exc}") from None

    def effective(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "model": dict(self.model),
            "train": self.train_config().to_dict(),
            "scenario": self.scenario_config().to_dict(),
            "paths": dict(self.paths),
        }


def load_run_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must hold a JSON object")
    return _coerce_run_config(data)


def _section(data: dict[str, Any], key: str) -> dict[str, Any]:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"Config section '{key}' must be an object")
    return dict(value)


def _coerce_run_config(data: dict[str, Any]) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown config sections: {', '.join(sorted(unknown))}")

    mode = data.get("mode", "3d")
    if mode not in MODES:
        raise ConfigError(f"Unknown mode '{mode}'. Use one of: {', '.join(MODES)}")

    model = _section(data, "model")
    unknown = set(model) - {f.name for f in fields(ModelConfig)}
    if unknown:
        raise ConfigError(f"Unknown model config keys: {', '.join(sorted(unknown))}")

    paths = _section(data, "paths")
    unknown = set(paths) - set(PATH_KEYS)
    if unknown:
        raise ConfigError(f"Unknown path keys: {', '.join(sorted(unknown))}")
    if not all(isinstance(v, str) for v in paths.values()):
        raise ConfigError("Config paths must be strings")

    config = RunConfig(
        mode=mode,
        model=model,
        train=_section(data, "train"),
        scenario=_section(data, "scenario"),
        paths=paths,
    )
    # surface bad values at load time
    config.train_config()
    config.scenario_config()
    return config


def apply_overrides(
    config: RunConfig,
    *,
    seed: int | None = None,
    mode: str | None = None,
    map_strategy: str | None = None,
    epochs: int | None = None,
    paths: dict[str, str | None] | None = None,
) -> RunConfig:
    """Command-line values win over file values."""
    if mode is not None:
        config = replace(config, mode=mode, scenario={**config.scenario, "mode": mode})
    if seed is not None:
        config = replace(config, train={**config.train, "seed": seed}, scenario={**config.scenario, "seed": seed})
    if epochs is not None:
        config = replace(config, train={**config.train, "epochs": epochs})
    if map_strategy is not None:
        config = replace(config, model={**config.model, "map_strategy": map_strategy})
    if paths:
        config = replace(config, paths={**config.paths, **{k: v for k, v in paths.items() if v is not None}})
    return config
