import json
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from canseg.core.errors import ConfigError

Activation = Literal["relu", "hard_swish"]
FusionStyle = Literal["add", "concat", "concat_attention", "concat_attention_bottleneck"]

T = TypeVar("T", bound=BaseModel)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def parse_config(model: Type[T], data: dict) -> T:
    """Validate `data` against `model`, reporting the first bad field as a ConfigError."""
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise _to_config_error(e) from None


def _to_config_error(e: ValidationError) -> ConfigError:
    first = e.errors()[0]
    path = ".".join(str(p) for p in first["loc"])
    return ConfigError(first["msg"], path=path)


# ---------------------------------------------------------------------------
# Architecture records
# ---------------------------------------------------------------------------


class SPPConfig(StrictModel):
    scales: List[int] = Field(default_factory=lambda: [1, 3, 6, 8], description="Pyramid grid sizes n; each level pools to n×n")

    @field_validator("scales")
    @classmethod
    def _positive(cls, v: List[int]) -> List[int]:
        if not v or any(n <= 0 for n in v):
            raise ValueError("scales must be a non-empty list of positive ints")
        return v

    @property
    def positions(self) -> int:
        """M, the number of sampled key/value positions."""
        return sum(n * n for n in self.scales)


class GhostConvConfig(StrictModel):
    out_channels: Optional[int] = Field(default=None, ge=1, description="Set per use site when embedded in ModelConfig")
    ratio: int = Field(default=2, ge=1, description="s: one in s output channels comes from the primary conv")
    primary_kernel: int = 1
    cheap_kernel: int = 3

    @field_validator("primary_kernel", "cheap_kernel")
    @classmethod
    def _odd(cls, v: int) -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError("kernel sizes must be positive and odd")
        return v

    @model_validator(mode="after")
    def _ratio_fits(self) -> "GhostConvConfig":
        if self.out_channels is not None and self.ratio > self.out_channels:
            raise ValueError(f"ratio {self.ratio} exceeds out_channels {self.out_channels}")
        return self

    def with_out(self, out_channels: int) -> "GhostConvConfig":
        return parse_config(GhostConvConfig, {**self.model_dump(), "out_channels": out_channels})

    @property
    def primary_channels(self) -> int:
        return math.ceil(self.out_channels / self.ratio)

    @property
    def cheap_channels(self) -> int:
        return self.out_channels - self.primary_channels


class InvertedResidualConfig(StrictModel):
    in_channels: int = Field(ge=1)
    expand_channels: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    kernel: Literal[3, 5] = 3
    stride: Literal[1, 2] = 1
    use_se: bool = False
    activation: Activation = "relu"

    @property
    def use_residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


def _ir(i: int, e: int, o: int, k: int, s: int, se: bool, act: str) -> InvertedResidualConfig:
    return InvertedResidualConfig(
        in_channels=i, expand_channels=e, out_channels=o, kernel=k, stride=s, use_se=se, activation=act
    )


def default_backbone() -> List[InvertedResidualConfig]:
    """Eight-block MobileNetV3-Small-style schedule: stem 1/2 → 1/16, 96 channels out."""
    return [
        _ir(16, 16, 16, 3, 2, True, "relu"),
        _ir(16, 64, 24, 3, 2, False, "relu"),
        _ir(24, 72, 24, 3, 1, False, "relu"),
        _ir(24, 96, 40, 5, 2, True, "hard_swish"),
        _ir(40, 120, 40, 5, 1, True, "hard_swish"),
        _ir(40, 120, 48, 5, 1, True, "hard_swish"),
        _ir(48, 144, 48, 5, 1, True, "hard_swish"),
        _ir(48, 192, 96, 5, 1, True, "hard_swish"),
    ]


class ModelConfig(StrictModel):
    num_classes: int = Field(default=4, ge=2)
    input_channels: Literal[3] = 3
    spatial_channels: List[int] = Field(default_factory=lambda: [32, 48, 64, 64])
    stem_channels: int = Field(default=16, ge=1)
    backbone: List[InvertedResidualConfig] = Field(default_factory=default_backbone)
    backbone_out_channels: Optional[int] = Field(default=None, ge=1, description="Optional final 1×1 conv of the backbone")
    se_reduction: int = Field(default=4, ge=1)
    ga_embed_channels: int = Field(default=32, ge=1)
    ga_value_channels: int = Field(default=96, ge=1)
    ga_groups: int = Field(default=1, ge=1)
    ga_use_spp: bool = True
    ga_use_cheap_ops: bool = True
    spp: SPPConfig = Field(default_factory=SPPConfig)
    ghost: GhostConvConfig = Field(default_factory=GhostConvConfig)
    context_out_channels: int = Field(default=64, ge=1)
    ffm_style: FusionStyle = "concat_attention_bottleneck"
    ffm_mid_channels: int = Field(default=64, ge=1)
    ffm_out_channels: int = Field(default=128, ge=1)
    ffm_attention_reduction: int = Field(default=4, ge=1)
    train_mode: bool = True
    seed: int = 0

    @field_validator("spatial_channels")
    @classmethod
    def _four_positive(cls, v: List[int]) -> List[int]:
        if len(v) != 4 or any(c <= 0 for c in v):
            raise ValueError("spatial_channels needs four positive widths")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "ModelConfig":
        if not self.backbone:
            raise ValueError("backbone needs at least one block")
        width = self.stem_channels
        for i, block in enumerate(self.backbone):
            if block.in_channels != width:
                raise ValueError(f"backbone block {i} expects {block.in_channels} channels, receives {width}")
            width = block.out_channels
        if self.output_stride != 16:
            raise ValueError(f"backbone output stride is {self.output_stride}, must be 16")
        if self.ga_embed_channels % self.ga_groups or self.ga_value_channels % self.ga_groups:
            raise ValueError("ga_groups must divide ga_embed_channels and ga_value_channels")
        if self.ffm_style == "add" and self.spatial_channels[3] != self.context_out_channels:
            raise ValueError("ffm_style 'add' needs spatial_channels[3] == context_out_channels")
        return self

    @property
    def output_stride(self) -> int:
        return 2 * math.prod(b.stride for b in self.backbone)

    @property
    def context_channels(self) -> int:
        """Width entering the attention blocks."""
        return self.backbone_out_channels or self.backbone[-1].out_channels


# ---------------------------------------------------------------------------
# Training records
# ---------------------------------------------------------------------------


class OhemConfig(StrictModel):
    prob_threshold: float = Field(default=0.7, gt=0.0, le=1.0)
    min_kept: Optional[int] = Field(default=None, ge=1, description="None keeps at least 1/16 of valid pixels")
    ignore_index: int = 255


class TrainSchedule(StrictModel):
    base_lr: float = Field(default=0.02, gt=0.0)
    power: float = Field(default=0.9, gt=0.0)
    max_iter: int = Field(default=3000, gt=0)
    momentum: float = Field(default=0.9, ge=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)


class DatasetConfig(StrictModel):
    height: int = 64
    width: int = 64
    batch_size: int = Field(default=8, ge=1)
    augment: bool = True
    val_size: int = Field(default=32, ge=1)

    @field_validator("height", "width")
    @classmethod
    def _div16(cls, v: int) -> int:
        if v <= 0 or v % 16:
            raise ValueError("dataset extents must be positive multiples of 16")
        return v


class TrainConfig(StrictModel):
    seed: int = 1
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    ohem: OhemConfig = Field(default_factory=OhemConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    log_interval: int = Field(default=20, ge=1)
    val_interval: int = Field(default=500, ge=1)


class IoConfig(StrictModel):
    weights: Path = Path("runs/toy.canw")
    checkpoint_dir: Path = Path("runs/checkpoints")
    output_dir: Path = Path("runs/out")


class RunConfig(StrictModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    io: IoConfig = Field(default_factory=IoConfig)

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON ({e.msg}, line {e.lineno})", path=str(path)) from None
        except OSError as e:
            raise ConfigError(str(e), path=str(path)) from None
        return parse_config(cls, data)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class LossReport(BaseModel):
    l_p: float = Field(ge=0.0)
    l_c1: float = Field(ge=0.0)
    l_c2: float = Field(ge=0.0)
    total: float = Field(ge=0.0)
    kept_pixels: Dict[str, int]

    @model_validator(mode="after")
    def _additive(self) -> "LossReport":
        if abs(self.total - (self.l_p + self.l_c1 + self.l_c2)) > 1e-6:
            raise ValueError("total must equal l_p + l_c1 + l_c2")
        return self


class ComplexityRow(BaseModel):
    name: str
    kind: str
    params: int
    flops: int
    madd: int
    out_shape: Tuple[int, int, int, int]
    activation_bytes: int


class ComplexityTotals(BaseModel):
    params: int = 0
    flops: int = 0
    madd: int = 0
    activation_bytes: int = 0


class ComplexityReport(BaseModel):
    input_shape: Tuple[int, int, int, int]
    rows: List[ComplexityRow]
    totals: ComplexityTotals
    peak_activation_bytes: int


class AttentionCost(BaseModel):
    h: int
    w: int
    A: int
    M: int
    embed: int
    dense_madds: int
    reduced_madds: int
    ratio: float


class VariantCost(BaseModel):
    name: str
    params: int
    flops: int


class MIoUReport(BaseModel):
    per_class: List[Optional[float]] = Field(description="IoU per class; None where the class is absent from both maps")
    mean: float


class BenchReport(BaseModel):
    height: int
    width: int
    warmup: int
    samples_ms: List[float]
    median_ms: float
    p95_ms: float
    fps: float
    note: str = "wall-clock numbers are machine-dependent and not reproducible"


class GradCheckRow(BaseModel):
    block: str
    max_rel_error: float
    passed: bool


class SelfTestResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""
