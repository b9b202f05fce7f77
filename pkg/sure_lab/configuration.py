import enum
import json
import typing
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError


DEFAULT_DEFERRAL_QUANTILES = [round(0.1 + 0.05 * i, 2) for i in range(17)] + [0.65]


class Configuration(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="SURE_LAB_")

    log_level: str = Field(default="INFO")
    max_workers: int = Field(default=4, ge=1)
    deferral_quantiles: list[float] = Field(
        default_factory=lambda: sorted(set(DEFAULT_DEFERRAL_QUANTILES))
    )
    verify_seeds: int = Field(default=10, ge=1)
    float_format: str = Field(default="%.17g")


class Method(str, enum.Enum):
    SURE = "sure"
    SURE_NLL = "sure-nll"
    SURE_MCDROPOUT = "sure-mcdropout"
    SURE_ENSEMBLE = "sure-ensemble"
    ABLATION_1A = "ablation-1a"
    ABLATION_1B = "ablation-1b"
    ABLATION_2A = "ablation-2a"
    ABLATION_2B = "ablation-2b"
    ABLATION_3 = "ablation-3"

    @property
    def is_ablation(self) -> bool:
        return self.value.startswith("ablation-")

    @property
    def is_baseline(self) -> bool:
        return self in (Method.SURE_NLL, Method.SURE_MCDROPOUT, Method.SURE_ENSEMBLE)


class DatasetConfig(BaseModel):
    """Synthetic multimodal task: shared latent factor u, per-modality linear views."""

    model_config = ConfigDict(extra="forbid")

    n_modalities: int = Field(default=3, ge=2)
    modality_dims: list[int] = Field(default_factory=lambda: [12, 12, 12])
    latent_dim: int = Field(default=8, ge=1)
    noise_scales: list[float] = Field(default_factory=lambda: [0.1, 0.3, 0.6])
    task: typing.Literal["regression", "classification"] = "classification"
    n_classes: int = Field(default=4, ge=1)
    n_samples: int = Field(default=10_000, ge=2)
    n_finetune: int = Field(default=1_000, ge=2)
    n_test: int = Field(default=1_000, ge=2)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "DatasetConfig":
        if len(self.modality_dims) != self.n_modalities:
            raise ValueError(
                f"modality_dims has {len(self.modality_dims)} entries, expected {self.n_modalities}"
            )
        if len(self.noise_scales) != self.n_modalities:
            raise ValueError(
                f"noise_scales has {len(self.noise_scales)} entries, expected {self.n_modalities}"
            )
        if any(d < 1 for d in self.modality_dims):
            raise ValueError("modality dims must be >= 1")
        if any(s < 0 for s in self.noise_scales):
            raise ValueError("noise scales must be >= 0")
        if self.task == "classification" and self.n_classes < 2:
            raise ValueError("classification needs n_classes >= 2")
        return self

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.task == "classification" else 1


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    mask_fraction: float = Field(default=0.5, ge=0.0, lt=1.0)
    method: Method = Method.SURE
    seed: int = Field(default=0, ge=0)
    seeds: list[typing.Annotated[int, Field(ge=0)]] = Field(default_factory=list)

    latent_dim: int = Field(default=16, ge=1)
    fusion_dim: int = Field(default=32, ge=1)
    head_hidden: int = Field(default=32, ge=1)

    batch_size: int = Field(default=64, ge=2)
    pretrain_epochs: int = Field(default=20, ge=1)
    pretrain_lr: float = Field(default=1e-3, gt=0)
    phase1_epochs: int = Field(default=100, ge=1)
    phase1_lr: float = Field(default=1e-3, gt=0)
    phase2_epochs: int = Field(default=100, ge=1)
    phase2_lr: float = Field(default=1e-3, gt=0)

    lam: float = Field(default=1.0, ge=0.0)
    lam_out: float = Field(default=1.0, ge=0.0)
    mc_passes: int = Field(default=20, ge=1)
    ensemble_members: int = Field(default=5, ge=1)
    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    holdout_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)

    def with_seed(self, seed: int) -> "RunConfig":
        dataset = self.dataset.model_copy(update={"seed": seed})
        return self.model_copy(update={"seed": seed, "seeds": [], "dataset": dataset})


def load_run_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid run config {path}: {e.errors()[0]['msg']}") from e


def load_dataset_config(path: str | Path) -> DatasetConfig:
    """Accepts either a bare DatasetConfig or a RunConfig JSON."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        if "dataset" in raw:
            return RunConfig.model_validate(raw).dataset
        return DatasetConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid dataset config {path}: {e.errors()[0]['msg']}") from e
