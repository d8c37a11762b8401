import math
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(StrictModel):
    input_height: int = Field(32, ge=1)
    input_width: int = Field(32, ge=1)
    embed_dim: int = Field(64, ge=1)
    hidden_dim: int = Field(256, ge=1)
    n_classes: int = Field(8, ge=2)

    @property
    def input_dim(self) -> int:
        return self.input_height * self.input_width


class LossConfig(StrictModel):
    focal_gamma: float = Field(2.0, ge=0.0)
    lambda1: float = Field(1.0, ge=0.0)
    lambda2: float = Field(1.0, ge=0.0)
    temp_init_log: float = math.log(1.0 / 0.07)
    temp_max: float = Field(100.0, gt=0.0)


class TrainConfig(StrictModel):
    learning_rate: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    # 0 is allowed: the loop then returns the initialization untouched
    iterations: int = Field(2000, ge=0)
    loss: LossConfig = Field(default_factory=LossConfig)
    scl_enabled: bool = True
    seed: int = Field(0, ge=0)
    log_every: int = Field(50, ge=1)


class GeneratorSpec(StrictModel):
    n_classes: int = Field(8, ge=2)
    images_per_class: int = Field(200, ge=2)
    height: int = Field(32, ge=8)
    width: int = Field(32, ge=8)
    n_bands: int = Field(8, ge=2)
    band_levels: List[float] = Field(default_factory=lambda: [0.25, 0.55, 0.85])
    confusable_pairs: int = Field(2, ge=0)
    noise_sigma: float = Field(0.03, ge=0.0)
    bend_amplitude_max: float = Field(0.15, ge=0.0, le=0.3)
    length_jitter: float = Field(0.2, ge=0.0, lt=0.25)
    contrast_gain: float = Field(1.0, gt=0.0)
    intensity_offset: float = Field(0.0, ge=-0.5, le=0.5)
    split: str = Field("train", pattern="^(train|val|test)$")
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_codes(self) -> "GeneratorSpec":
        levels = self.band_levels
        if len(levels) < 2:
            raise ValueError("band_levels needs at least two intensities")
        if any(not 0.0 <= level <= 1.0 for level in levels):
            raise ValueError("band_levels must lie within [0, 1]")
        if len(set(levels)) != len(levels):
            raise ValueError("band_levels must be distinct")
        if 2 * self.confusable_pairs > self.n_classes:
            raise ValueError(
                f"{self.confusable_pairs} confusable pairs need at least "
                f"{2 * self.confusable_pairs} classes, got {self.n_classes}"
            )
        return self


class RunConfig(StrictModel):
    """Validated contents of a run configuration file (JSON or YAML)."""

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    generator: GeneratorSpec = Field(default_factory=GeneratorSpec)


class TrainLogRow(StrictModel):
    iteration: int
    l_total: float
    l_con: float
    l_cls: float
    temperature: float
    batch_acc: float


class ConfusedPair(StrictModel):
    true_class: int
    predicted_class: int
    count: int


class SeparationStats(StrictModel):
    mean_intra_cos: float
    mean_inter_cos: float
    separation_gap: float
    n_intra_pairs: int
    n_inter_pairs: int


class MetricsReport(StrictModel):
    accuracy: float
    macro_recall: float
    macro_ovr_auc: Optional[float] = None
    confusion: List[List[int]]
    per_class_recall: List[Optional[float]]
    n_samples: int
    class_names: List[str] = Field(default_factory=list)
    top_confused_pairs: List[ConfusedPair] = Field(default_factory=list)
    separation: Optional[SeparationStats] = None



class AblationRow(StrictModel):
    """One line of the with/without-SCL comparison table."""

    seed: str
    scl: str
    accuracy: float
    macro_recall: float
    macro_auc: float
    separation_gap: float
