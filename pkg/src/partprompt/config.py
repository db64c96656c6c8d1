"""Run configuration: one JSON-serializable record drives every command.

Config files are versioned JSON; CLI flags override file values and the
resolved configuration is re-emitted next to every run's outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .validation import (
    check_choice,
    check_non_negative_int,
    check_positive_int,
    check_unit_interval,
)

CONFIG_SCHEMA_VERSION = 1

DESIGNS = ("protonet", "lgp", "lpp", "ppl")


@dataclass
class RunConfig:
    data_root: str = ""
    split_id: int = 0
    split_seed: int = 0
    design: str = "ppl"

    visual_arch: str = "desk_conv8"
    text_arch: str = "hash_stub"
    channels: int = 64
    stride: int = 8
    token_dim: int = 32
    context_limit: int = 77
    text_frozen: bool = True

    n_specific: int = 4
    n_shared: int = 4
    n_text: int = 4
    momentum: float = 0.99
    alpha: float = 0.5
    background_in_softmax: bool = True
    learned_background: bool = False
    loss_weight_visual: float = 1.0
    loss_weight_textual: float = 1.0

    base_lr: float = 0.01
    sgd_momentum: float = 0.9
    poly_power: float = 0.9
    max_steps: int = 3000
    k_shot: int = 1
    seed: int = 0
    overfit_one_episode: bool = False

    eval_episodes: int = 200
    eval_partition: str = "novel"
    eval_every: int = 0
    checkpoint_every: int = 0
    dtype: str = "float64"
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        check_choice(self.design, DESIGNS, "design")
        check_unit_interval(self.momentum, "momentum")
        check_unit_interval(self.alpha, "alpha")
        check_choice(self.eval_partition, ("base", "novel"), "eval_partition")
        check_choice(self.dtype, ("float32", "float64"), "dtype")
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigurationError(
                f"unsupported config schema_version {self.schema_version}"
            )
        check_positive_int(self.k_shot, "k_shot")
        check_positive_int(self.eval_episodes, "eval_episodes")
        for name in ("max_steps", "n_specific", "n_shared", "n_text",
                     "eval_every", "checkpoint_every"):
            check_non_negative_int(getattr(self, name), name)
        if not (0 <= self.split_id <= 3):
            raise ConfigurationError(f"split_id must be in 0..3, got {self.split_id}")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be > 0, got {self.base_lr}")

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        unknown = set(payload) - cls.field_names()
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: Path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}")
        if overrides:
            payload.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(payload)


def resolve_config(config_path: Path | None, overrides: dict) -> RunConfig:
    """File values overlaid with non-None flag overrides (flags win)."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    if config_path is not None:
        return RunConfig.from_file(config_path, clean)
    return RunConfig.from_dict(clean)


def write_resolved_config(config: RunConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(config.to_json(), encoding="utf-8")
    return path
