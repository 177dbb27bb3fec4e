"""Pydantic models for configuration, dataset records and evaluation results."""

from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class RunMode(str, Enum):
    """Training schedules.

    Examples:
        >>> RunMode("meta-train")
        <RunMode.META_TRAIN: 'meta-train'>
    """

    META_TRAIN = "meta-train"
    """Episodic training over base classes."""

    FINETUNE = "finetune"
    """Balanced K-shot tuning over base and novel classes, backbone frozen."""


class PromptOrigin(str, Enum):
    """Which generator produced a soft prompt or semantic prototype."""

    STUDENT = "student"
    TEACHER = "teacher"


class PromptPosition(str, Enum):
    """Where the teacher's soft prompt sits relative to the class-name tokens.

    Examples:
        >>> [p.value for p in PromptPosition]
        ['prefix', 'suffix', 'surround']
    """

    PREFIX = "prefix"
    """Prompt tokens, then the class name (default)."""

    SUFFIX = "suffix"
    """Class name, then the prompt tokens."""

    SURROUND = "surround"
    """First half of the prompt, class name, second half."""


class GeneratorVariant(str, Enum):
    """Soft prompt generator architectures.

    Examples:
        >>> GeneratorVariant.ONE_LAYER.value
        'one-layer'
    """

    ONE_LAYER = "one-layer"
    TWO_LAYER = "two-layer"
    PRE_TRANSFORMER = "pre-transformer"
    POST_TRANSFORMER = "post-transformer"
    SHARED = "shared"
    """A single learned prompt shared by all classes, ignoring the support set."""


class FusionMode(str, Enum):
    """How a semantic prototype is combined with a visual prototype."""

    ADDITION = "addition"
    MULTIPLICATION = "multiplication"
    CONCATENATION = "concatenation"


class MpgPlacement(str, Enum):
    """Which detector stages receive multi-modal prototypes.

    Examples:
        >>> MpgPlacement("rpn+rcnn").uses_rpn
        True
        >>> MpgPlacement.RCNN_ONLY.uses_rpn
        False
    """

    NONE = "none"
    RCNN_ONLY = "rcnn-only"
    RPN_AND_RCNN = "rpn+rcnn"

    @property
    def uses_rpn(self) -> bool:
        return self is MpgPlacement.RPN_AND_RCNN

    @property
    def uses_rcnn(self) -> bool:
        return self is not MpgPlacement.NONE


class ContrastiveSource(str, Enum):
    """Which semantic prototypes enter the visual-semantic contrastive loss."""

    TEACHER = "teacher"
    STUDENT = "student"


class Interpolation(str, Enum):
    """Precision-recall interpolation used by AP."""

    COCO101 = "coco101"
    VOC11 = "voc11"


class PrototypePath(str, Enum):
    """Which semantic path builds prototypes at meta-testing."""

    STUDENT = "student"
    """No class names consumed (default)."""

    TEACHER = "teacher"
    """Name-conditioned comparison path; requires class names."""


# =========================================================================
# Geometry and dataset records
# =========================================================================


class Box(BaseModel):
    """Axis-aligned box in corner form, pixel units.

    Examples:
        >>> box = Box.from_xywh([2, 3, 10, 5])
        >>> box.as_tuple()
        (2.0, 3.0, 12.0, 8.0)
        >>> box.area
        50.0
        >>> Box(x1=5, y1=0, x2=5, y2=1)
        Traceback (most recent call last):
        ...
        pydantic_core._pydantic_core.ValidationError: 1 validation error for Box
        ...
    """

    model_config = ConfigDict(frozen=True)

    x1: float
    y1: float
    x2: float
    y2: float

    @model_validator(mode="after")
    def _check_order(self) -> "Box":
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}: need x1 < x2 and y1 < y2")
        return self

    @classmethod
    def from_xywh(cls, xywh: list[float] | tuple[float, ...]) -> "Box":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x1=x, y1=y, x2=x + w, y2=y + h)

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


class ImageRecord(BaseModel):
    """One entry of the manifest's ``images`` array."""

    id: int
    file_name: str
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)


class AnnotationRecord(BaseModel):
    """One box annotation; ``bbox`` is held in corner form."""

    id: int
    image_id: int
    category_id: int
    bbox: Box


class CategoryRecord(BaseModel):
    """A class id with its (optional) name."""

    id: int
    name: Optional[str] = None


class ClassSplit(BaseModel):
    """Disjoint base and novel class ids.

    Examples:
        >>> split = ClassSplit(base={1, 2}, novel={3})
        >>> sorted(split.all_ids)
        [1, 2, 3]
        >>> ClassSplit(base={1, 2}, novel={2})
        Traceback (most recent call last):
        ...
        pydantic_core._pydantic_core.ValidationError: 1 validation error for ClassSplit
        ...
    """

    base: frozenset[int]
    novel: frozenset[int]

    @model_validator(mode="after")
    def _check_disjoint(self) -> "ClassSplit":
        overlap = self.base & self.novel
        if overlap:
            raise ValueError(f"base and novel classes overlap: {sorted(overlap)}")
        return self

    @property
    def all_ids(self) -> frozenset[int]:
        return self.base | self.novel


class ToyDatasetSpec(BaseModel):
    """Parameters of the synthetic shape-and-colour benchmark.

    Examples:
        >>> ToyDatasetSpec().num_classes
        12
        >>> ToyDatasetSpec(num_classes=1)
        Traceback (most recent call last):
        ...
        pydantic_core._pydantic_core.ValidationError: 1 validation error for ToyDatasetSpec
        ...
    """

    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(default=12, ge=2, le=20)
    num_images: int = Field(default=400, ge=1)
    image_size: int = Field(default=64, ge=32)
    max_objects: int = Field(default=3, ge=1)
    min_object_size: int = Field(default=12, ge=4)
    max_object_size: int = Field(default=28, ge=4)
    seed: int = 0

    @model_validator(mode="after")
    def _check_sizes(self) -> "ToyDatasetSpec":
        if self.min_object_size > self.max_object_size:
            raise ValueError("min_object_size must not exceed max_object_size")
        if self.max_object_size >= self.image_size:
            raise ValueError("max_object_size must be smaller than image_size")
        return self


class DetectionRecord(BaseModel):
    """One line of a detection dump, in manifest conventions (``bbox`` is xywh)."""

    image_id: int
    category_id: int
    bbox: list[float] = Field(..., min_length=4, max_length=4)
    score: float = Field(..., ge=0.0, le=1.0)

    @property
    def box(self) -> Box:
        return Box.from_xywh(self.bbox)


# =========================================================================
# Run configuration
# =========================================================================


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class OptimizerConfig(_Section):
    """Momentum SGD settings.

    Examples:
        >>> cfg = OptimizerConfig()
        >>> (cfg.rate, cfg.momentum, cfg.weight_decay)
        (0.001, 0.9, 0.0001)
    """

    rate: float = Field(default=0.001, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0001, ge=0)


class DataConfig(_Section):
    """Where the training and test data live."""

    manifest: Optional[Path] = None
    image_root: Optional[Path] = None
    split: Optional[Path] = None
    test_manifest: Optional[Path] = None
    test_image_root: Optional[Path] = None
    toy: ToyDatasetSpec = Field(default_factory=ToyDatasetSpec)
    test_images: int = Field(default=100, ge=1, description="Images in the generated test set")
    num_novel: int = Field(default=4, ge=1, description="Novel classes in a generated split")


class ModelConfig(_Section):
    """Architecture sizes of the desk-scale detector."""

    image_size: int = Field(default=64, ge=32)
    visual_channels: int = Field(default=64, ge=4, description="C_v")
    text_channels: int = Field(default=32, ge=4, description="C_t")
    text_layers: int = Field(default=2, ge=1)
    text_heads: int = Field(default=4, ge=1)
    text_max_len: int = Field(default=32, ge=4)
    text_seed: int = Field(default=1234, description="Seed of the frozen text encoder")
    support_size: int = Field(default=64, ge=16)
    support_context: int = Field(default=16, ge=0)
    roi_size: int = Field(default=7, ge=1)
    anchor_sizes: list[float] = Field(default_factory=lambda: [12.0, 20.0, 32.0])
    rpn_nms: float = Field(default=0.7, gt=0, lt=1)
    top_n_train: int = Field(default=32, ge=1)
    top_n_test: int = Field(default=100, ge=1)
    init_seed: int = 0

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.text_channels % self.text_heads:
            raise ValueError("text_channels must be divisible by text_heads")
        return self


class MpgConfig(_Section):
    """Multi-modal prototype generation settings."""

    prompt_len: int = Field(default=8, ge=1)
    prompt_position: PromptPosition = PromptPosition.PREFIX
    generator_variant: GeneratorVariant = GeneratorVariant.ONE_LAYER
    fusion: FusionMode = FusionMode.ADDITION
    placement: MpgPlacement = MpgPlacement.RPN_AND_RCNN
    generator_init_std: float = Field(default=0.02, gt=0)
    hidden_dim: int = Field(default=128, ge=1, description="Hidden width of the two-layer variant")


class LossConfig(_Section):
    """Loss hyperparameters and sampling ratios."""

    temperature: float = Field(default=0.01, gt=0)
    contrastive_source: ContrastiveSource = ContrastiveSource.TEACHER
    rpn_samples: int = Field(default=64, ge=1)
    rcnn_samples: int = Field(default=64, ge=1)
    positive_fraction: float = Field(default=0.25, gt=0, le=1)
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rcnn_positive_iou: float = 0.5


class EvalConfig(_Section):
    """Meta-testing protocol."""

    shots: list[int] = Field(default_factory=lambda: [1, 5])
    seeds: list[int] = Field(default_factory=lambda: [0, 1])
    score_threshold: float = Field(default=0.05, gt=0, lt=1)
    nms_threshold: float = Field(default=0.5, gt=0, lt=1)
    interpolation: Interpolation = Interpolation.COCO101
    prototype_path: PrototypePath = PrototypePath.STUDENT
    max_images: Optional[int] = Field(default=None, ge=1)


class FinetuneConfig(_Section):
    """The shorter fine-tuning schedule over the balanced base and novel set.

    Examples:
        >>> cfg = FinetuneConfig()
        >>> cfg.rate, cfg.iterations, cfg.decay_step, cfg.shot
        (0.002, 300, 200, 1)
    """

    rate: float = Field(default=0.002, gt=0)
    iterations: int = Field(default=300, ge=1)
    decay_step: int = Field(default=200, ge=1)
    shot: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_schedule(self) -> "FinetuneConfig":
        if self.decay_step >= self.iterations:
            raise ValueError(
                f"finetune.decay_step ({self.decay_step}) must be smaller than "
                f"finetune.iterations ({self.iterations})"
            )
        return self


class RunConfig(_Section):
    """Everything a training or evaluation run needs.

    Examples:
        >>> cfg = RunConfig()
        >>> cfg.optimizer.rate, cfg.batch_size, cfg.iterations, cfg.decay_step
        (0.001, 8, 2000, 1500)
        >>> cfg.schedule()
        (0.001, 2000, 1500)
        >>> RunConfig(mode="finetune").schedule()
        (0.002, 300, 200)
        >>> RunConfig(iterations=10, decay_step=10)
        Traceback (most recent call last):
        ...
        pydantic_core._pydantic_core.ValidationError: 1 validation error for RunConfig
        ...
    """

    mode: RunMode = RunMode.META_TRAIN
    seed: int = 0
    batch_size: int = Field(default=8, ge=1, description="Episodes accumulated per optimizer step")
    iterations: int = Field(default=2000, ge=1)
    decay_step: int = Field(default=1500, ge=1)
    way: int = Field(default=2, ge=1)
    shot: int = Field(default=30, ge=1)
    queries_per_episode: int = Field(default=4, ge=1)
    log_every: int = Field(default=50, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    mpg: MpgConfig = Field(default_factory=MpgConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_schedule(self) -> "RunConfig":
        if self.decay_step >= self.iterations:
            raise ValueError(
                f"decay_step ({self.decay_step}) must be smaller than iterations ({self.iterations})"
            )
        if self.model.image_size != self.data.toy.image_size:
            raise ValueError("model.image_size must equal data.toy.image_size")
        if self.mpg.prompt_len >= self.model.text_max_len:
            raise ValueError(
                f"mpg.prompt_len ({self.mpg.prompt_len}) leaves no room for a class name "
                f"within model.text_max_len ({self.model.text_max_len})"
            )
        return self

    def schedule(self) -> tuple[float, int, int]:
        """Return ``(rate, iterations, decay_step)`` for the configured mode."""
        if self.mode is RunMode.FINETUNE:
            return (self.finetune.rate, self.finetune.iterations, self.finetune.decay_step)
        return (self.optimizer.rate, self.iterations, self.decay_step)


# =========================================================================
# Evaluation results
# =========================================================================


class MetricsRow(BaseModel):
    """AP figures for one (shot, class set, seed) cell; ``seed=None`` marks the mean.

    Examples:
        >>> MetricsRow(shot=1, ap=0.2, ap50=0.5, ap75=0.1).seed is None
        True
        >>> MetricsRow(shot=1, ap=0.6, ap50=0.5, ap75=0.1)
        Traceback (most recent call last):
        ...
        pydantic_core._pydantic_core.ValidationError: 1 validation error for MetricsRow
        ...
    """

    shot: int
    class_set: str = "novel"
    seed: Optional[int] = None
    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0

    @model_validator(mode="after")
    def _check_order(self) -> "MetricsRow":
        eps = 1e-9
        if not (-eps <= self.ap <= self.ap50 + eps and self.ap50 <= 1 + eps):
            raise ValueError(f"expected 0 <= AP <= AP50 <= 1, got AP={self.ap}, AP50={self.ap50}")
        if not (-eps <= self.ap75 <= self.ap50 + eps):
            raise ValueError(f"expected 0 <= AP75 <= AP50, got AP75={self.ap75}, AP50={self.ap50}")
        return self


class MetricsTable(BaseModel):
    """Meta-testing results: per-seed rows plus one mean row per shot.

    Examples:
        >>> table = MetricsTable(rows=[MetricsRow(shot=1, seed=0, ap50=0.5)])
        >>> table.row(1, seed=0).ap50
        0.5
        >>> table.row(5) is None
        True
    """

    rows: list[MetricsRow] = Field(default_factory=list)
    seeds: list[int] = Field(default_factory=list)
    checkpoint_digest: Optional[str] = None

    @field_validator("rows")
    @classmethod
    def _unique_cells(cls, rows: list[MetricsRow]) -> list[MetricsRow]:
        keys = [(r.shot, r.class_set, r.seed) for r in rows]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate (shot, class_set, seed) rows")
        return rows

    def row(self, shot: int, seed: Optional[int] = None, class_set: str = "novel") -> Optional[MetricsRow]:
        """Return the row for a cell, or None."""
        for r in self.rows:
            if r.shot == shot and r.seed == seed and r.class_set == class_set:
                return r
        return None

    def mean_rows(self) -> list[MetricsRow]:
        return [r for r in self.rows if r.seed is None]

    def print_summary(self) -> None:
        """Print the mean rows as a small table."""
        print(f"{'shot':>5} {'classes':>8} {'AP':>7} {'AP50':>7} {'AP75':>7}")
        print("=" * 38)
        for r in self.mean_rows():
            print(f"{r.shot:>5} {r.class_set:>8} {100 * r.ap:7.2f} {100 * r.ap50:7.2f} {100 * r.ap75:7.2f}")
