"""Configuration management for the DFBF toolkit"""
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError


def _threads_from_env() -> int:
    raw = os.environ.get("DFBF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"DFBF_THREADS must be an integer, got {raw!r}")


@dataclass
class Config:
    """Application configuration"""
    # Execution
    threads: int = field(default_factory=_threads_from_env)

    # Storage settings
    runs_dir: Path = Path("runs")

    # Logging
    log_level: str = "INFO"
    log_file: Optional[Path] = None


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    arch: Literal["resnet_tiny", "vgg_tiny"] = "resnet_tiny"
    stage_channels: List[int] = [16, 32, 64]
    blocks_per_stage: List[int] = [1, 1, 1]
    vgg_plan: List[Union[int, Literal["M"]]] = [16, "M", 32, "M", 64]
    num_classes: int = Field(4, ge=1)
    init_seed: int = 0


class DataSection(_Section):
    dataset: Literal["shapes", "cifar10"] = "shapes"
    data_dir: Optional[Path] = None
    shapes_classes: int = Field(4, ge=1, le=4)
    shapes_train_per_class: int = Field(1000, ge=1)
    shapes_test_per_class: int = Field(200, ge=1)
    image_size: int = Field(32, ge=8)

    @model_validator(mode="after")
    def _cifar_needs_dir(self):
        if self.dataset == "cifar10" and self.data_dir is None:
            raise ValueError("data_dir is required for the cifar10 dataset")
        return self


class TrainSection(_Section):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)


class PruneSection(_Section):
    ratio: float = 0.3
    strategy: Literal["l1", "bn_scale"] = "l1"
    mode: Literal["uniform", "size_weighted"] = "uniform"

    @field_validator("ratio")
    @classmethod
    def _ratio_range(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("ratio must be in [0,1)")
        return v


class SynthConfig(_Section):
    """Pixel-optimization settings for the synthetic dataset"""
    image_size: Tuple[int, int] = (32, 32)
    batch_size: int = Field(64, ge=1)
    num_images: int = Field(1600, ge=1)
    steps: int = Field(1000, ge=0)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    alpha_bn: float = Field(1.0, ge=0)
    alpha_tv: float = Field(1e-2, ge=0)
    alpha_l2: float = Field(1e-4, ge=0)
    clamp: Tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def _min_size(cls, v):
        if v[0] < 2 or v[1] < 2:
            raise ValueError("synthetic images need w, h >= 2")
        return v

    @field_validator("clamp")
    @classmethod
    def _ordered(cls, v):
        if not v[0] < v[1]:
            raise ValueError("clamp range must be (low, high) with low < high")
        return v


class DistillConfig(_Section):
    """Backbone fine-tuning settings"""
    gamma: float = Field(0.0, ge=0)
    taps: Literal["all", "every_second", "output_only"] = "all"
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    # "initial" decays toward the pruned weights, "zero" is plain L2 decay; BN and bias never decay
    decay_toward: Literal["initial", "zero"] = "initial"
    max_grad_norm: Optional[float] = Field(1.0, gt=0)
    normalize_channels: bool = False
    compare_original_images: bool = False
    seed: int = 0


class EvalSection(_Section):
    batch_size: int = Field(256, ge=1)
    plots: bool = False


class RunConfig(_Section):
    """Complete run description; every field has a default"""
    seed: int = 0
    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    prune: PruneSection = Field(default_factory=PruneSection)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    eval: EvalSection = Field(default_factory=EvalSection)

    @classmethod
    def from_file(cls, path: Optional[Path]) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            return cls.model_validate(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        except ValidationError as e:
            raise ConfigError(f"invalid config {path}:\n{e}") from e

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Propagate a run seed into every seeded section"""
        if seed is None:
            return self
        return self.model_copy(update={
            "seed": seed,
            "model": self.model.model_copy(update={"init_seed": seed}),
            "synth": self.synth.model_copy(update={"seed": seed}),
            "distill": self.distill.model_copy(update={"seed": seed}),
        })

    def resolved(self) -> str:
        return self.model_dump_json(indent=2)

    def with_overrides(self, section: str, **values) -> "RunConfig":
        """Replace fields of one section, re-validating the whole document"""
        updates = {k: v for k, v in values.items() if v is not None}
        if not updates:
            return self
        data = self.model_dump()
        data[section].update(updates)
        try:
            return type(self).model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid {section} settings: {e}") from e
