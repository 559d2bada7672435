"""Configuration dataclasses for runs of the LC-Net engine."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Final

from .const import (
    CIFAR10_IMAGE_SIZE,
    CONF_AUGMENT_CROP,
    CONF_AUGMENT_FLIP,
    CONF_BACKBONE_LR,
    CONF_BATCH_SIZE,
    CONF_BLOCK_INDEX,
    CONF_BLOCK_KIND,
    CONF_CHECKPOINT,
    CONF_COUNT_GATE_FLOPS,
    CONF_DATA,
    CONF_DECAY_FACTOR,
    CONF_DECAY_PERIOD,
    CONF_EPOCHS,
    CONF_EVAL,
    CONF_EXPANSION,
    CONF_EXTREMES_K,
    CONF_FREEZE_GATES,
    CONF_GATE_LR,
    CONF_HISTOGRAM_BINS,
    CONF_IMAGE_SIZE,
    CONF_IN_CHANNELS,
    CONF_L1_LAMBDA,
    CONF_LAYER,
    CONF_LEAK,
    CONF_MAX_CHANNELS,
    CONF_MAX_INSTANCES,
    CONF_MODE,
    CONF_MODEL,
    CONF_MOMENTUM,
    CONF_NUM_CLASSES,
    CONF_OUTPUT_DIR,
    CONF_PATH,
    CONF_PLACEMENT,
    CONF_PRETRAINED,
    CONF_RECIPE,
    CONF_SEED,
    CONF_SOURCE,
    CONF_STAGE_DEPTHS,
    CONF_STAGE_WIDTHS,
    CONF_STEM_WIDTH,
    CONF_SYNTHETIC_CLASSES,
    CONF_SYNTHETIC_TEST,
    CONF_SYNTHETIC_TRAIN,
    CONF_TEST_SUBSET,
    CONF_TRAIN,
    CONF_TRAIN_SUBSET,
    CONF_WEIGHT_DECAY,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BOTTLENECK_EXPANSION,
    DEFAULT_DECAY_FACTOR,
    DEFAULT_EXTREMES_K,
    DEFAULT_HISTOGRAM_BINS,
    DEFAULT_IN_CHANNELS,
    DEFAULT_L1_LAMBDA,
    DEFAULT_LEAK,
    DEFAULT_LR,
    DEFAULT_MATRIX_CHANNELS,
    DEFAULT_MOMENTUM,
    DEFAULT_NUM_CLASSES,
    DEFAULT_SEED,
    DEFAULT_STAGE_DEPTHS,
    DEFAULT_STAGE_WIDTHS,
    DEFAULT_WEIGHT_DECAY,
    MAX_SYNTHETIC_CLASSES,
    RECIPES,
    BlockKind,
    Command,
    DataSource,
    LayerSelector,
    Placement,
    Recipe,
    TrainMode,
)

_LOGGER = logging.getLogger(__name__)

# Commands that read a trained network
_CHECKPOINT_COMMANDS: Final = (Command.EVAL, Command.TRACE, Command.FLOPS_REPORT)


@dataclass
class ModelConfig:
    """Shape of the gated residual network."""

    block_kind: BlockKind = BlockKind.BASIC
    stage_widths: tuple[int, ...] = DEFAULT_STAGE_WIDTHS
    stage_depths: tuple[int, ...] = DEFAULT_STAGE_DEPTHS
    num_classes: int = DEFAULT_NUM_CLASSES
    in_channels: int = DEFAULT_IN_CHANNELS
    stem_width: int | None = None  # defaults to the first stage width
    expansion: int = DEFAULT_BOTTLENECK_EXPANSION

    @property
    def resolved_stem_width(self) -> int:
        """Return the stem's output channel count."""
        return self.stem_width if self.stem_width is not None else self.stage_widths[0]

    @property
    def num_blocks(self) -> int:
        """Return the number of gated blocks."""
        return sum(self.stage_depths)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for storage."""
        return {
            CONF_BLOCK_KIND: str(self.block_kind),
            CONF_STAGE_WIDTHS: list(self.stage_widths),
            CONF_STAGE_DEPTHS: list(self.stage_depths),
            CONF_NUM_CLASSES: self.num_classes,
            CONF_IN_CHANNELS: self.in_channels,
            CONF_STEM_WIDTH: self.stem_width,
            CONF_EXPANSION: self.expansion,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        """Create from dictionary."""
        return cls(
            block_kind=BlockKind(data.get(CONF_BLOCK_KIND, BlockKind.BASIC)),
            stage_widths=tuple(data.get(CONF_STAGE_WIDTHS, DEFAULT_STAGE_WIDTHS)),
            stage_depths=tuple(data.get(CONF_STAGE_DEPTHS, DEFAULT_STAGE_DEPTHS)),
            num_classes=data.get(CONF_NUM_CLASSES, DEFAULT_NUM_CLASSES),
            in_channels=data.get(CONF_IN_CHANNELS, DEFAULT_IN_CHANNELS),
            stem_width=data.get(CONF_STEM_WIDTH),
            expansion=data.get(CONF_EXPANSION, DEFAULT_BOTTLENECK_EXPANSION),
        )

    def validate(self) -> list[str]:
        """Validate the model shape and return a list of errors."""
        errors = []
        if not self.stage_widths:
            errors.append("At least one stage is required")
        if len(self.stage_widths) != len(self.stage_depths):
            errors.append(
                f"{len(self.stage_widths)} stage widths but {len(self.stage_depths)} stage depths"
            )
        if any(w < 1 for w in self.stage_widths):
            errors.append("Stage widths must be positive")
        if any(d < 1 for d in self.stage_depths):
            errors.append("Stage depths must be positive")
        if self.num_classes < 2:
            errors.append(f"Need at least 2 classes, got {self.num_classes}")
        if self.in_channels < 1:
            errors.append("Input channel count must be positive")
        if self.stem_width is not None and self.stem_width < 1:
            errors.append("Stem width must be positive")
        if self.block_kind == BlockKind.BOTTLENECK and self.expansion < 1:
            errors.append("Bottleneck expansion must be positive")
        return errors


@dataclass
class DataConfig:
    """Where instances come from and how they are augmented."""

    source: DataSource = DataSource.SYNTHETIC
    path: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    synthetic_train: int = 1000
    synthetic_test: int = 200
    synthetic_classes: int = DEFAULT_NUM_CLASSES
    image_size: int = CIFAR10_IMAGE_SIZE
    augment_crop: bool = True
    augment_flip: bool = True

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for storage."""
        return {
            CONF_SOURCE: str(self.source),
            CONF_PATH: self.path,
            CONF_TRAIN_SUBSET: self.train_subset,
            CONF_TEST_SUBSET: self.test_subset,
            CONF_SYNTHETIC_TRAIN: self.synthetic_train,
            CONF_SYNTHETIC_TEST: self.synthetic_test,
            CONF_SYNTHETIC_CLASSES: self.synthetic_classes,
            CONF_IMAGE_SIZE: self.image_size,
            CONF_AUGMENT_CROP: self.augment_crop,
            CONF_AUGMENT_FLIP: self.augment_flip,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DataConfig:
        """Create from dictionary."""
        return cls(
            source=DataSource(data.get(CONF_SOURCE, DataSource.SYNTHETIC)),
            path=data.get(CONF_PATH),
            train_subset=data.get(CONF_TRAIN_SUBSET),
            test_subset=data.get(CONF_TEST_SUBSET),
            synthetic_train=data.get(CONF_SYNTHETIC_TRAIN, 1000),
            synthetic_test=data.get(CONF_SYNTHETIC_TEST, 200),
            synthetic_classes=data.get(CONF_SYNTHETIC_CLASSES, DEFAULT_NUM_CLASSES),
            image_size=data.get(CONF_IMAGE_SIZE, CIFAR10_IMAGE_SIZE),
            augment_crop=data.get(CONF_AUGMENT_CROP, True),
            augment_flip=data.get(CONF_AUGMENT_FLIP, True),
        )

    def validate(self) -> list[str]:
        """Validate the data section and return a list of errors."""
        errors = []
        if self.source == DataSource.CIFAR10 and not self.path:
            errors.append("CIFAR-10 source requires a data path")
        if not 1 <= self.synthetic_classes <= MAX_SYNTHETIC_CLASSES:
            errors.append(f"Synthetic classes must be in [1, {MAX_SYNTHETIC_CLASSES}]")
        for name, value in (
            (CONF_TRAIN_SUBSET, self.train_subset),
            (CONF_TEST_SUBSET, self.test_subset),
        ):
            if value is not None and value < 1:
                errors.append(f"{name} must be positive when set")
        if self.synthetic_train < 0 or self.synthetic_test < 0:
            errors.append("Synthetic sizes must be non-negative")
        if self.image_size < 8:
            errors.append(f"Image size must be at least 8, got {self.image_size}")
        return errors


@dataclass
class TrainConfig:
    """Optimisation recipe."""

    epochs: int = 30
    batch_size: int = DEFAULT_BATCH_SIZE
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    backbone_lr: float = DEFAULT_LR
    gate_lr: float = DEFAULT_LR
    decay_factor: float = DEFAULT_DECAY_FACTOR
    decay_period: int = 10
    l1_lambda: float = DEFAULT_L1_LAMBDA
    seed: int = DEFAULT_SEED
    mode: TrainMode = TrainMode.FROM_SCRATCH
    leak: float = DEFAULT_LEAK
    freeze_gates: bool = False
    pretrained: str | None = None

    @classmethod
    def from_recipe(cls, recipe: Recipe, **overrides: Any) -> TrainConfig:
        """Build a config from a named recipe."""
        values: dict[str, Any] = dict(RECIPES[recipe])
        values.update(overrides)
        return cls.from_dict(values)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for storage."""
        return {
            CONF_EPOCHS: self.epochs,
            CONF_BATCH_SIZE: self.batch_size,
            CONF_MOMENTUM: self.momentum,
            CONF_WEIGHT_DECAY: self.weight_decay,
            CONF_BACKBONE_LR: self.backbone_lr,
            CONF_GATE_LR: self.gate_lr,
            CONF_DECAY_FACTOR: self.decay_factor,
            CONF_DECAY_PERIOD: self.decay_period,
            CONF_L1_LAMBDA: self.l1_lambda,
            CONF_SEED: self.seed,
            CONF_MODE: str(self.mode),
            CONF_LEAK: self.leak,
            CONF_FREEZE_GATES: self.freeze_gates,
            CONF_PRETRAINED: self.pretrained,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        """Create from dictionary."""
        return cls(
            epochs=data.get(CONF_EPOCHS, 30),
            batch_size=data.get(CONF_BATCH_SIZE, DEFAULT_BATCH_SIZE),
            momentum=data.get(CONF_MOMENTUM, DEFAULT_MOMENTUM),
            weight_decay=data.get(CONF_WEIGHT_DECAY, DEFAULT_WEIGHT_DECAY),
            backbone_lr=data.get(CONF_BACKBONE_LR, DEFAULT_LR),
            gate_lr=data.get(CONF_GATE_LR, DEFAULT_LR),
            decay_factor=data.get(CONF_DECAY_FACTOR, DEFAULT_DECAY_FACTOR),
            decay_period=data.get(CONF_DECAY_PERIOD, 10),
            l1_lambda=data.get(CONF_L1_LAMBDA, DEFAULT_L1_LAMBDA),
            seed=data.get(CONF_SEED, DEFAULT_SEED),
            mode=TrainMode(data.get(CONF_MODE, TrainMode.FROM_SCRATCH)),
            leak=data.get(CONF_LEAK, DEFAULT_LEAK),
            freeze_gates=data.get(CONF_FREEZE_GATES, False),
            pretrained=data.get(CONF_PRETRAINED),
        )

    def validate(self) -> list[str]:
        """Validate the recipe and return a list of errors."""
        errors = []
        if self.epochs < 1:
            errors.append(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be positive, got {self.batch_size}")
        if self.backbone_lr <= 0 or self.gate_lr <= 0:
            errors.append("Learning rates must be positive")
        if self.decay_factor <= 0:
            errors.append("decay_factor must be positive")
        if self.decay_period < 1:
            errors.append("decay_period must be positive")
        elif self.decay_period > self.epochs:
            errors.append(f"decay_period {self.decay_period} exceeds epochs {self.epochs}")
        if not 0 <= self.momentum < 1:
            errors.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            errors.append("weight_decay must be non-negative")
        if self.l1_lambda < 0:
            errors.append(f"l1_lambda must be non-negative, got {self.l1_lambda}")
        if self.leak < 0:
            errors.append("leak must be non-negative")
        if self.mode == TrainMode.FINE_TUNE and not self.pretrained:
            errors.append("Fine-tuning requires a pretrained checkpoint")
        return errors


@dataclass
class EvalConfig:
    """Cost accounting and analytics knobs."""

    placement: Placement = Placement.SEQUENTIAL
    count_gate_flops: bool = True
    extremes_k: int = DEFAULT_EXTREMES_K
    histogram_bins: int = DEFAULT_HISTOGRAM_BINS
    block_index: int = 0
    layer: LayerSelector = LayerSelector.SECOND_LAYER_INPUT
    max_channels: int | None = DEFAULT_MATRIX_CHANNELS
    max_instances: int | None = None

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for storage."""
        return {
            CONF_PLACEMENT: str(self.placement),
            CONF_COUNT_GATE_FLOPS: self.count_gate_flops,
            CONF_EXTREMES_K: self.extremes_k,
            CONF_HISTOGRAM_BINS: self.histogram_bins,
            CONF_BLOCK_INDEX: self.block_index,
            CONF_LAYER: str(self.layer),
            CONF_MAX_CHANNELS: self.max_channels,
            CONF_MAX_INSTANCES: self.max_instances,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvalConfig:
        """Create from dictionary."""
        return cls(
            placement=Placement(data.get(CONF_PLACEMENT, Placement.SEQUENTIAL)),
            count_gate_flops=data.get(CONF_COUNT_GATE_FLOPS, True),
            extremes_k=data.get(CONF_EXTREMES_K, DEFAULT_EXTREMES_K),
            histogram_bins=data.get(CONF_HISTOGRAM_BINS, DEFAULT_HISTOGRAM_BINS),
            block_index=data.get(CONF_BLOCK_INDEX, 0),
            layer=LayerSelector(data.get(CONF_LAYER, LayerSelector.SECOND_LAYER_INPUT)),
            max_channels=data.get(CONF_MAX_CHANNELS, DEFAULT_MATRIX_CHANNELS),
            max_instances=data.get(CONF_MAX_INSTANCES),
        )

    def validate(self) -> list[str]:
        """Validate the section and return a list of errors."""
        errors = []
        if self.extremes_k < 1:
            errors.append("extremes_k must be positive")
        if self.histogram_bins < 1:
            errors.append("histogram_bins must be positive")
        if self.block_index < 0:
            errors.append("block_index must be non-negative")
        if self.max_channels is not None and self.max_channels < 1:
            errors.append("max_channels must be positive when set")
        if self.max_instances is not None and self.max_instances < 1:
            errors.append("max_instances must be positive when set")
        return errors


@dataclass
class RunConfig:
    """Everything one CLI invocation needs."""

    command: Command = Command.TRAIN
    recipe: Recipe = Recipe.DESK
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"
    checkpoint: str | None = None

    def to_dict(self) -> dict[str, Any]:
        """Convert to a JSON-ready dictionary."""
        return {
            CONF_RECIPE: str(self.recipe),
            CONF_MODEL: self.model.to_dict(),
            CONF_DATA: self.data.to_dict(),
            CONF_TRAIN: self.train.to_dict(),
            CONF_EVAL: self.eval.to_dict(),
            CONF_OUTPUT_DIR: self.output_dir,
            CONF_CHECKPOINT: self.checkpoint,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], command: Command = Command.TRAIN) -> RunConfig:
        """Create from an already validated dictionary."""
        return cls(
            command=command,
            recipe=Recipe(data.get(CONF_RECIPE, Recipe.DESK)),
            model=ModelConfig.from_dict(data.get(CONF_MODEL, {})),
            data=DataConfig.from_dict(data.get(CONF_DATA, {})),
            train=TrainConfig.from_dict(data.get(CONF_TRAIN, {})),
            eval=EvalConfig.from_dict(data.get(CONF_EVAL, {})),
            output_dir=data.get(CONF_OUTPUT_DIR, "runs"),
            checkpoint=data.get(CONF_CHECKPOINT),
        )

    def validate(self) -> list[str]:
        """Validate every section, prefixing errors with the section name."""
        errors = []
        for section, config in (
            (CONF_MODEL, self.model),
            (CONF_DATA, self.data),
            (CONF_TRAIN, self.train),
            (CONF_EVAL, self.eval),
        ):
            errors.extend(f"{section}: {error}" for error in config.validate())
        if self.data.source == DataSource.SYNTHETIC and (
            self.data.synthetic_classes > self.model.num_classes
        ):
            errors.append(
                f"{CONF_DATA}: {self.data.synthetic_classes} synthetic classes exceed "
                f"the model's {self.model.num_classes}"
            )
        if self.command in _CHECKPOINT_COMMANDS and not self.checkpoint:
            errors.append(f"{CONF_CHECKPOINT}: command {self.command} needs a checkpoint")
        return errors
