import json
import os
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigurationError
from .services.apd_sensor import NoiseToggles, SensorParams
from .services.artifacts import config_hash
from .services.dataset_gen import default_modulations
from .services.gbtree import TrainConfig
from .services.light_transport import SceneRanges
from .services.scene_studio import CornerScene
from .services.signal_core import ModulationConfig, TraceConfig
from .services.tpe_opt import TpeConfig

CONFIG_SCHEMA_VERSION = 1

DEFAULT_OUT_DIR = "artifacts"
DEFAULT_LOG_LEVEL = "INFO"


class DatasetSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(default=100_000, ge=1)
    mode: Literal["trace", "analytic"] = "trace"
    train_fraction: float = Field(default=0.8, gt=0, lt=1)
    noise_scale: float = Field(default=1.0, ge=0)


class TuneSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_rows: int = Field(default=20_000, ge=10)
    validation_fraction: float = Field(default=0.2, gt=0, lt=1)
    tune_knn: bool = True


class SceneSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Literal["trace", "analytic"] = "trace"
    toggles: NoiseToggles = NoiseToggles.none()


class PathSettings(BaseModel):
    """Artifact file names, resolved against the output directory."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dataset: str = "dataset.csv"
    model: str = "model.json"
    hyperparams: str = "hyperparams.json"


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = Field(default=0, ge=0)
    sensor: SensorParams = SensorParams()
    toggles: NoiseToggles = NoiseToggles.all_on()
    ranges: SceneRanges = SceneRanges()
    modulations: List[ModulationConfig] = Field(default_factory=default_modulations)
    trace: TraceConfig = TraceConfig()
    dataset: DatasetSettings = DatasetSettings()
    train: TrainConfig = TrainConfig()
    tpe: TpeConfig = TpeConfig()
    tune: TuneSettings = TuneSettings()
    knn_k: int = Field(default=5, ge=1)
    corner: CornerScene = CornerScene()
    scene: SceneSettings = SceneSettings()
    histogram_bin_mm: float = Field(default=0.5, gt=0)
    paths: PathSettings = PathSettings()

    @field_validator("schema_version")
    @classmethod
    def _known_version(cls, v: int) -> int:
        if v != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {v}, expected {CONFIG_SCHEMA_VERSION}")
        return v

    @field_validator("modulations")
    @classmethod
    def _four_ascending(cls, v: List[ModulationConfig]) -> List[ModulationConfig]:
        freqs = [cfg.f for cfg in v]
        if len(v) != 4 or freqs != sorted(set(freqs)):
            raise ValueError(f"expected four strictly ascending modulation frequencies, got {freqs}")
        return v

    def seeded(self, seed: Optional[int]) -> "RunConfig":
        """Copy with one master seed pushed into every seeded sub-config."""
        if seed is None:
            seed = self.seed
        return self.model_copy(
            update={
                "seed": seed,
                "train": self.train.model_copy(update={"seed": seed}),
                "tpe": self.tpe.model_copy(update={"seed": seed}),
            }
        )

    def digest(self) -> str:
        return config_hash(self.model_dump(mode="json"))


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: not a JSON document ({e})") from e
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigurationError(f"{path}: invalid config: {e}") from e


def env_threads() -> int:
    raw = os.getenv("COAXMPI_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigurationError(f"COAXMPI_THREADS must be an integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigurationError(f"COAXMPI_THREADS must be >= 1, got {threads}")
    return threads


def env_out_dir() -> Path:
    return Path(os.getenv("COAXMPI_OUT", DEFAULT_OUT_DIR))


def env_log_level() -> str:
    return os.getenv("COAXMPI_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()
