"""Run configuration: dataclass sections with strict JSON loading."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .schedule import ConfigError, make_linear


@dataclass
class ScheduleConfig:
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class EngineConfig:
    process: str = "interpolate"  # interpolate | reconstruct
    operator: str = "offset_clean"
    T: int = 50
    finetune_steps: int = 50
    lr: float = 3e-5
    seed: int = 0
    objective: str = "step"  # step | chain, for the interpolation process
    noise: str = "seeded"  # seeded | zero
    inversion: str = "ddim"  # ddim | closed, for the reconstruction process


@dataclass
class ExtractionConfig:
    mode: str = "propagate"
    beta: int = 4
    window_fraction: float = 0.8
    seg_threshold: float = 0.5


@dataclass
class TrackerConfig:
    sigma: float = 1.5
    warm_start: bool = False
    rebuild_tokens: bool = True  # False: keep the frame-0 tokens for the whole clip
    model_seed: int = 0
    embed_dim: int = 32
    layers: int = 2
    mlp_ratio: int = 4
    sink: bool = True
    basis_seed: int = 7
    vocab_size: int = 16
    vocab_seed: int = 11
    max_targets: int = 1  # boxes kept when bootstrapping from text


@dataclass
class PathsConfig:
    seq: str | None = None
    indicator: str | None = None
    out: str | None = None
    vocab: str | None = None


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int | None = None  # overrides engine.seed when set

    @property
    def effective_seed(self) -> int:
        return self.engine.seed if self.seed is None else self.seed

    def noise_schedule(self):
        return make_linear(self.engine.T, self.schedule.beta_start, self.schedule.beta_end)

    def validate(self) -> None:
        e, x = self.engine, self.extraction
        choices = {
            "engine.process": (e.process, ("interpolate", "reconstruct")),
            "engine.operator": (e.operator, ("blend", "from_next", "from_current",
                                              "offset_clean", "offset_noisy")),
            "engine.objective": (e.objective, ("step", "chain")),
            "engine.noise": (e.noise, ("seeded", "zero")),
            "engine.inversion": (e.inversion, ("ddim", "closed")),
            "extraction.mode": (x.mode, ("propagate", "elementwise")),
        }
        for key, (val, allowed) in choices.items():
            if val not in allowed:
                raise ConfigError(f"{key}: {val!r} not in {list(allowed)}")
        if e.T < 1:
            raise ConfigError(f"engine.T: must be >= 1, got {e.T}")
        if e.finetune_steps < 0:
            raise ConfigError(f"engine.finetune_steps: must be >= 0, got {e.finetune_steps}")
        if e.lr < 0:
            raise ConfigError(f"engine.lr: must be >= 0, got {e.lr}")
        if x.beta < 1:
            raise ConfigError(f"extraction.beta: must be >= 1, got {x.beta}")
        if not 0 < x.window_fraction <= 1:
            raise ConfigError(f"extraction.window_fraction: must be in (0, 1], got {x.window_fraction}")
        if not 0 <= x.seg_threshold < 1:
            raise ConfigError(f"extraction.seg_threshold: must be in [0, 1), got {x.seg_threshold}")
        make_linear(e.T, self.schedule.beta_start, self.schedule.beta_end)

    def require(self, *keys: str) -> None:
        """Raise with the dotted key path of the first unset required value."""
        for key in keys:
            section, name = key.split(".")
            if getattr(getattr(self, section), name) in (None, ""):
                raise ConfigError(f"missing required config key {key}")

    def to_json(self) -> dict:
        return asdict(self)


def _coerce(value, ftype: str, path: str):
    if ftype in ("int", "int | None") and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got {value!r}")
    if ftype.startswith("int") and value is not None:
        if not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}")
    elif ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        value = float(value)
    elif ftype == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif ftype.startswith("str") and value is not None and not isinstance(value, str):
        raise ConfigError(f"{path}: expected string, got {value!r}")
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in data if k not in fields]
    if unknown:
        raise ConfigError(f"unknown config key {prefix}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        ftype = f.type if isinstance(f.type, str) else f.type.__name__
        if ftype.endswith("Config"):
            kwargs[name] = _build(globals()[ftype], value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, ftype, prefix + name)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(data)
