"""Run configuration files (TOML).

Example::

    seed = 0

    [model]
    preset = "tiny"        # optional; other keys override the preset
    channels = 16

    [loss]
    gan_weight = 0.005

    [trainer]
    steps = 500
    out_dir = "runs/smoke"

    [data]
    n_pairs = 50
    snr_min = 0.0
    snr_max = 15.0
    duration = 0.5

Unknown sections or keys are errors. Relative paths are resolved against
the directory holding the file.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import NOISE_KINDS, build_corpus, draw_specs, read_manifest
from .gan import LossWeights
from .model import PRESETS, ModelConfig
from .train import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    n_pairs: int = 50
    snr_min: float = -5.0
    snr_max: float = 20.0
    discrete_snrs: tuple | None = None
    kinds: tuple = NOISE_KINDS
    duration: float = 3.0
    seed: int | None = None

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be positive")
        if self.snr_min > self.snr_max:
            raise ValueError("snr_min exceeds snr_max")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        bad = set(self.kinds) - set(NOISE_KINDS)
        if bad:
            raise ValueError(f"unknown noise kinds {sorted(bad)}")

    def specs(self, default_seed=0):
        if self.manifest is not None:
            return read_manifest(self.manifest)
        seed = default_seed if self.seed is None else self.seed
        return draw_specs(
            self.n_pairs, seed, (self.snr_min, self.snr_max), self.discrete_snrs, self.kinds, self.duration
        )

    def corpus(self, default_seed=0):
        return build_corpus(self.specs(default_seed))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    path: str | None = None

    def to_dict(self):
        d = asdict(self)
        d.pop("path")
        return d


_SECTIONS = {"model", "loss", "trainer", "data"}


def _section(cls, raw, name):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
    return raw


def parse(raw: dict, base_dir=".", source="<config>") -> RunConfig:
    unknown = set(raw) - _SECTIONS - {"seed"}
    if unknown:
        raise ConfigError(f"{source}: unknown top-level keys {sorted(unknown)}")
    try:
        model_raw = dict(raw.get("model", {}))
        preset = model_raw.pop("preset", None)
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"[model]: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset] if preset else ModelConfig()
        model = base.replace(**_section(ModelConfig, model_raw, "model"))
        loss = LossWeights(**_section(LossWeights, raw.get("loss", {}), "loss"))
        trainer_raw = dict(_section(TrainerConfig, raw.get("trainer", {}), "trainer"))
        if "out_dir" in trainer_raw:
            trainer_raw["out_dir"] = os.path.join(base_dir, trainer_raw["out_dir"])
        trainer = TrainerConfig(**trainer_raw)
        data_raw = dict(_section(DataConfig, raw.get("data", {}), "data"))
        if data_raw.get("manifest") is not None:
            data_raw["manifest"] = os.path.join(base_dir, data_raw["manifest"])
        for key in ("discrete_snrs", "kinds"):
            if data_raw.get(key) is not None:
                data_raw[key] = tuple(data_raw[key])
        data = DataConfig(**data_raw)
        seed = raw.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(model, loss, trainer, data, seed, source)


def load(path) -> RunConfig:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse(raw, os.path.dirname(os.path.abspath(path)), path)
