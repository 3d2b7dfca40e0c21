"""Run configuration: TOML in, dataclasses out, resolved TOML written back."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from ..errors import ConfigError
from ..topology import ModelConfig
from .synthetic import SyntheticSpec


def _build(cls, data: dict | None):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**data)


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | jsonl | kuairand
    path: str | None = None
    synthetic: dict = field(default_factory=dict)
    schema: dict = field(default_factory=dict)
    max_length: int | None = None  # raw history cap before any sampling
    batch_size: int = 32
    steps: int = 1000

    def __post_init__(self):
        if self.source not in ("synthetic", "jsonl", "kuairand"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ConfigError(f"data source {self.source!r} needs a path")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")

    @property
    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec.from_dict(self.synthetic)


@dataclass
class SlConfig:
    enabled: bool = False
    alpha: float = 1.6
    mode: str = "global"  # per_user | global
    lbsl: bool = False
    world_size: int = 1
    warmup_steps: int = 50
    recal_interval: int = 10
    gamma: float = 1.7
    l_sl: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("per_user", "global"):
            raise ConfigError(f"unknown SL mode {self.mode!r}")
        if self.lbsl and self.mode != "global":
            raise ConfigError("LBSL needs the global SL mode")
        if self.world_size < 1 or self.workers < 1:
            raise ConfigError("world_size and workers must be >= 1")


@dataclass
class OptimConfig:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.algorithm != "adam":
            raise ConfigError(f"unsupported optimizer {self.algorithm!r}")


@dataclass
class NumericsConfig:
    fp8: bool = False
    norm: bool = True
    remat: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class EvalConfig:
    split: float = 0.85
    tasks: list | None = None
    interval: int = 500
    batch_size: int = 256


@dataclass
class TrainConfig:
    model: ModelConfig
    data: DataConfig = field(default_factory=DataConfig)
    sl: SlConfig = field(default_factory=SlConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    init_std: float = 0.02

    @property
    def resolved_model(self) -> ModelConfig:
        """Model config with the numerics switches applied."""
        return replace(
            self.model,
            fp8=self.numerics.fp8,
            norm=self.numerics.norm,
            cache_mode="minimal" if self.numerics.remat else "full",
        )

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        if "model" not in raw:
            raise ConfigError("config has no [model] section")
        run = raw.get("run", {})
        try:
            model = ModelConfig.from_dict(raw["model"])
        except KeyError as exc:
            raise ConfigError(f"[model] is missing {exc}") from exc
        return cls(
            model=model,
            data=_build(DataConfig, raw.get("data")),
            sl=_build(SlConfig, raw.get("sl")),
            optim=_build(OptimConfig, raw.get("optim")),
            numerics=_build(NumericsConfig, raw.get("numerics")),
            eval=_build(EvalConfig, raw.get("eval")),
            seed=int(run.get("seed", 0)),
            init_std=float(run.get("init_std", 0.02)),
        )

    def to_dict(self) -> dict:
        return _drop_none(
            {
                "run": {"seed": self.seed, "init_std": self.init_std},
                "model": self.model.to_dict(),
                "data": asdict(self.data),
                "sl": asdict(self.sl),
                "optim": asdict(self.optim),
                "numerics": asdict(self.numerics),
                "eval": asdict(self.eval),
            }
        )


def _drop_none(obj):
    # TOML has no null
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_drop_none(v) for v in obj]
    return obj


def read_toml(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def write_toml(data: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        tomli_w.dump(_drop_none(data), fh)
    return path


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_dict(read_toml(path))
