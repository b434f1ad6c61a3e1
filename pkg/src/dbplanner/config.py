"""Run configuration: TOML file -> validated dataclasses with desk-scale
defaults for every field. Unknown sections or keys are rejected."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .geometry import BevSpec
from .losses import LossWeights
from .model import ModelConfig
from .world import PERTURB_MODES


class ConfigFileError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 500
    epochs: int = 40
    eval_every: int = 10


@dataclass
class DataConfig:
    train_seed_start: int = 1000
    train_size: int = 200
    val_seed_start: int = 900000
    val_size: int = 50
    straight_fraction: float = 0.75
    difficulty: float = 0.5
    plan_noise: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.straight_fraction <= 1.0:
            raise ConfigFileError("straight_fraction must be in [0, 1]")
        t0, t1 = self.train_seed_start, self.train_seed_start + self.train_size
        v0, v1 = self.val_seed_start, self.val_seed_start + self.val_size
        if max(t0, v0) < min(t1, v1):
            raise ConfigFileError("train and val seed ranges overlap")


@dataclass
class ExperimentConfig:
    perturbation_modes: tuple = PERTURB_MODES

    def __post_init__(self):
        bad = [m for m in self.perturbation_modes if m not in PERTURB_MODES]
        if bad:
            raise ConfigFileError(f"unknown perturbation modes {bad}")
        self.perturbation_modes = tuple(self.perturbation_modes)


@dataclass
class IOConfig:
    out_dir: str = "runs"
    data_dir: str = ""   # empty -> same as out_dir

    def resolved_data_dir(self) -> str:
        return self.data_dir or self.out_dir


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    io: IOConfig = field(default_factory=IOConfig)
    seed: int = 0


def _build(cls, table: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(table) - allowed
    if unknown:
        raise ConfigFileError(f"unknown keys in [{where}]: {sorted(unknown)}")
    coerced = {}
    for k, v in table.items():
        coerced[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as e:
        raise ConfigFileError(f"[{where}]: {e}") from None


def _build_model(table: dict) -> ModelConfig:
    table = dict(table)
    bev_table = table.pop("bev", None)
    spec = None
    if bev_table is not None:
        allowed = {"x_range", "y_range", "resolution"}
        unknown = set(bev_table) - allowed
        if unknown:
            raise ConfigFileError(f"unknown keys in [model.bev]: {sorted(unknown)}")
        try:
            spec = BevSpec(x_range=tuple(bev_table.get("x_range", (-15.0, 15.0))),
                           y_range=tuple(bev_table.get("y_range", (-7.5, 7.5))),
                           resolution=bev_table.get("resolution", 0.5))
        except ValueError as e:
            raise ConfigFileError(f"[model.bev]: {e}") from None
    cfg = _build(ModelConfig, table, "model")
    if spec is not None:
        cfg.bev = spec
    return cfg


_SECTIONS = {
    "model": _build_model,
    "losses": lambda t: _build(LossWeights, t, "losses"),
    "optimizer": lambda t: _build(OptimizerConfig, t, "optimizer"),
    "data": lambda t: _build(DataConfig, t, "data"),
    "experiment": lambda t: _build(ExperimentConfig, t, "experiment"),
    "io": lambda t: _build(IOConfig, t, "io"),
}


def load_run_config(path: str | None = None, seed: int | None = None,
                    out_dir: str | None = None) -> RunConfig:
    """Parse a TOML config (all fields optional) and apply CLI overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "rb") as f:
            try:
                doc = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigFileError(f"{path}: {e}") from None
        for key, value in doc.items():
            if key == "seed":
                cfg.seed = int(value)
            elif key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigFileError(f"[{key}] must be a table")
                setattr(cfg, key, _SECTIONS[key](value))
            else:
                raise ConfigFileError(f"unknown top-level key {key!r}")
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.io.out_dir = out_dir
    return cfg
