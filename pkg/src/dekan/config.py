"""Experiment configuration: one YAML/JSON file drives the whole pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .bench import BenchmarkConfig
from .inversion import InversionConfig
from .fusion import FusionConfig
from .distillation import DistillConfig
from . import tensorio

KNOWN_METHODS = ("dekan", "multi_di", "avg_pred", "highest_conf",
                 "best_teacher", "erm")


@dataclass(frozen=True)
class TeacherConfig:
    """Architecture and training settings for the per-domain teachers."""

    channels: tuple[int, ...] = (32, 64, 128)
    epochs: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 0.0
    min_val_accuracy: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not 0.0 <= self.min_val_accuracy <= 1.0:
            raise ConfigError("min_val_accuracy must be in [0,1]")

    def describe(self) -> dict:
        return {
            "channels": list(self.channels), "epochs": self.epochs,
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "min_val_accuracy": self.min_val_accuracy,
        }

    @staticmethod
    def from_dict(d: dict) -> "TeacherConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return TeacherConfig(**d)


@dataclass(frozen=True)
class SweepConfig:
    """Fallback grid over the moment weight and relaxation percentile,
    applied jointly to stages 1 and 2."""

    moment_weights: tuple[float, ...] = (1.0, 0.1, 10.0)
    epsilons: tuple[float, ...] = (95.0, 80.0, 100.0)

    def __post_init__(self):
        object.__setattr__(self, "moment_weights",
                           tuple(float(v) for v in self.moment_weights))
        object.__setattr__(self, "epsilons",
                           tuple(float(v) for v in self.epsilons))
        if not self.moment_weights or not self.epsilons:
            raise ConfigError("sweep grid must be non-empty")
        if any(not 0 <= e <= 100 for e in self.epsilons):
            raise ConfigError("sweep epsilons must be percentiles")

    def grid(self):
        return [(w, e) for w in self.moment_weights for e in self.epsilons]

    def describe(self) -> dict:
        return {"moment_weights": list(self.moment_weights),
                "epsilons": list(self.epsilons)}

    @staticmethod
    def from_dict(d: dict) -> "SweepConfig":
        return SweepConfig(**dict(d))


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkConfig = BenchmarkConfig()
    teacher: TeacherConfig = TeacherConfig()
    inversion: InversionConfig = InversionConfig()
    fusion: FusionConfig = FusionConfig()
    distill: DistillConfig = DistillConfig()
    sweep: SweepConfig = SweepConfig()
    methods: tuple[str, ...] = KNOWN_METHODS
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs/dekan"
    export_embeddings: bool = True

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        unknown = [m for m in self.methods if m not in KNOWN_METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; known: {KNOWN_METHODS}")
        if not self.methods:
            raise ConfigError("methods list cannot be empty")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    def describe(self) -> dict:
        return {
            "benchmark": self.benchmark.describe(),
            "teacher": self.teacher.describe(),
            "inversion": self.inversion.describe(),
            "fusion": self.fusion.describe(),
            "distill": self.distill.describe(),
            "sweep": self.sweep.describe(),
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "export_embeddings": self.export_embeddings,
        }

    def digest(self) -> str:
        return tensorio.config_digest(self.describe())

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        sections = {
            "benchmark": BenchmarkConfig.from_dict,
            "teacher": TeacherConfig.from_dict,
            "inversion": InversionConfig.from_dict,
            "fusion": FusionConfig.from_dict,
            "distill": DistillConfig.from_dict,
            "sweep": SweepConfig.from_dict,
        }
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                try:
                    kwargs[key] = sections[key](value)
                except TypeError as e:
                    raise ConfigError(f"bad '{key}' section: {e}") from e
            elif key in ("methods", "seeds", "output_dir", "export_embeddings"):
                kwargs[key] = tuple(value) if isinstance(value, list) else value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return ExperimentConfig(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.describe(), sort_keys=True))


def apply_sweep_point(config: ExperimentConfig, moment_weight: float,
                      epsilon: float) -> ExperimentConfig:
    """One fallback grid point: set the moment weight and percentile of both
    synthesis stages to the given values."""
    return replace(
        config,
        inversion=replace(config.inversion, lambda2=moment_weight, epsilon=epsilon),
        fusion=replace(config.fusion, alpha2=moment_weight, epsilon=epsilon),
    )
