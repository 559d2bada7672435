"""Constants for the LC-Net dynamic inference engine."""

from __future__ import annotations

from enum import StrEnum
from typing import Final

# Configuration sections
CONF_MODEL: Final = "model"
CONF_DATA: Final = "data"
CONF_TRAIN: Final = "train"
CONF_EVAL: Final = "eval"
CONF_OUTPUT_DIR: Final = "output_dir"
CONF_CHECKPOINT: Final = "checkpoint"
CONF_RECIPE: Final = "recipe"

# Model configuration keys
CONF_BLOCK_KIND: Final = "block_kind"
CONF_STAGE_WIDTHS: Final = "stage_widths"
CONF_STAGE_DEPTHS: Final = "stage_depths"
CONF_NUM_CLASSES: Final = "num_classes"
CONF_IN_CHANNELS: Final = "in_channels"
CONF_STEM_WIDTH: Final = "stem_width"
CONF_EXPANSION: Final = "expansion"

# Data configuration keys
CONF_SOURCE: Final = "source"
CONF_PATH: Final = "path"
CONF_TRAIN_SUBSET: Final = "train_subset"
CONF_TEST_SUBSET: Final = "test_subset"
CONF_SYNTHETIC_TRAIN: Final = "synthetic_train"
CONF_SYNTHETIC_TEST: Final = "synthetic_test"
CONF_SYNTHETIC_CLASSES: Final = "synthetic_classes"
CONF_IMAGE_SIZE: Final = "image_size"
CONF_AUGMENT_CROP: Final = "augment_crop"
CONF_AUGMENT_FLIP: Final = "augment_flip"

# Training configuration keys
CONF_EPOCHS: Final = "epochs"
CONF_BATCH_SIZE: Final = "batch_size"
CONF_MOMENTUM: Final = "momentum"
CONF_WEIGHT_DECAY: Final = "weight_decay"
CONF_BACKBONE_LR: Final = "backbone_lr"
CONF_GATE_LR: Final = "gate_lr"
CONF_DECAY_FACTOR: Final = "decay_factor"
CONF_DECAY_PERIOD: Final = "decay_period"
CONF_L1_LAMBDA: Final = "l1_lambda"
CONF_SEED: Final = "seed"
CONF_MODE: Final = "mode"
CONF_LEAK: Final = "leak"
CONF_FREEZE_GATES: Final = "freeze_gates"
CONF_PRETRAINED: Final = "pretrained"

# Eval / analytics configuration keys
CONF_PLACEMENT: Final = "placement"
CONF_COUNT_GATE_FLOPS: Final = "count_gate_flops"
CONF_EXTREMES_K: Final = "extremes_k"
CONF_HISTOGRAM_BINS: Final = "histogram_bins"
CONF_BLOCK_INDEX: Final = "block_index"
CONF_LAYER: Final = "layer"
CONF_MAX_CHANNELS: Final = "max_channels"
CONF_MAX_INSTANCES: Final = "max_instances"

# Numerics
DEFAULT_DTYPE: Final = "float32"
GRADCHECK_DTYPE: Final = "float64"

# Gate defaults
DEFAULT_LEAK: Final = 0.01
GATE_INIT_STD: Final = 0.01
GATE_INIT_BIAS: Final = 1.0

# Batch norm defaults
DEFAULT_BN_MOMENTUM: Final = 0.1
DEFAULT_BN_EPSILON: Final = 1e-5

# Optimisation defaults (CIFAR-10 recipe)
DEFAULT_MOMENTUM: Final = 0.9
DEFAULT_WEIGHT_DECAY: Final = 0.0005
DEFAULT_LR: Final = 0.01
DEFAULT_DECAY_FACTOR: Final = 10.0
DEFAULT_BATCH_SIZE: Final = 96
DEFAULT_SEED: Final = 0
DEFAULT_L1_LAMBDA: Final = 0.0

# Model defaults (desk-scale micro-net)
DEFAULT_STAGE_WIDTHS: Final = (16, 32, 64)
DEFAULT_STAGE_DEPTHS: Final = (2, 2, 2)
DEFAULT_NUM_CLASSES: Final = 10
DEFAULT_IN_CHANNELS: Final = 3
DEFAULT_BOTTLENECK_EXPANSION: Final = 4

# Data
CIFAR10_IMAGE_SIZE: Final = 32
CIFAR10_CHANNELS: Final = 3
CIFAR10_NUM_CLASSES: Final = 10
CIFAR10_RECORD_BYTES: Final = 1 + 3 * 32 * 32
CIFAR10_TRAIN_FILES: Final = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES: Final = ("test_batch.bin",)
CIFAR10_META_FILE: Final = "batches.meta.txt"
CIFAR10_CLASS_NAMES: Final = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)
CROP_PADDING: Final = 4
MAX_SYNTHETIC_CLASSES: Final = 10

# FLOPs counting conventions
FLOPS_PER_MAC: Final = 2
BN_FLOPS_PER_ELEMENT: Final = 2
RELU_FLOPS_PER_ELEMENT: Final = 1
POOL_FLOPS_PER_ELEMENT: Final = 1
DEFAULT_HISTOGRAM_BINS: Final = 10
DEFAULT_EXTREMES_K: Final = 5
DEFAULT_MATRIX_CHANNELS: Final = 50

# Checkpoint
CHECKPOINT_FORMAT_VERSION: Final = 1
CHECKPOINT_MANIFEST: Final = "manifest.json"
CHECKPOINT_PAYLOAD: Final = "payload.bin"
CHECKPOINT_FINAL: Final = "final"
CHECKPOINT_BEST: Final = "best"

# Artifacts
METRICS_CSV: Final = "metrics.csv"
TRACES_CSV: Final = "traces.csv"
TRACES_JSON: Final = "traces.json"
EXTREMES_CSV: Final = "flops_extremes.csv"
SUMMARY_JSON: Final = "summary.json"
RESOLVED_CONFIG_JSON: Final = "config.json"

# Exit codes
EXIT_OK: Final = 0
EXIT_FAILURE: Final = 1
EXIT_CONFIG_ERROR: Final = 2
EXIT_DATA_ERROR: Final = 3
EXIT_NUMERIC_ERROR: Final = 4


class Relu1Kind(StrEnum):
    """ReLU-1 variants."""

    TRAINING_LEAKY = "training-leaky"
    INFERENCE_STANDARD = "inference-standard"


class GateKind(StrEnum):
    """Gate network kinds."""

    BLOCK = "block-gate"
    CHANNEL = "channel-gate"


class BlockKind(StrEnum):
    """Residual block kinds."""

    BASIC = "basic"
    BOTTLENECK = "bottleneck"


class Placement(StrEnum):
    """Gate placement with respect to the block's first layer."""

    DENSE = "dense"
    PARALLEL = "parallel"
    SEQUENTIAL = "sequential"


class ExecutionMode(StrEnum):
    """How a network forward pass is executed."""

    TRAIN = "train"
    EVAL_DENSE = "eval-dense"
    EVAL_SKIPPING = "eval-skipping"


class TrainMode(StrEnum):
    """Where training starts from."""

    FROM_SCRATCH = "from-scratch"
    FINE_TUNE = "fine-tune-pretrained"


class Split(StrEnum):
    """Dataset splits."""

    TRAIN = "train"
    TEST = "test"


class DataSource(StrEnum):
    """Dataset sources."""

    CIFAR10 = "cifar10"
    SYNTHETIC = "synthetic"


class LayerSelector(StrEnum):
    """Channel set a gated block exposes to analytics.

    C-Net gates the first layer's output channels, which are the same channels the
    second layer reads, so both selectors name one channel set.
    """

    FIRST_LAYER_OUTPUT = "first-layer-output"
    SECOND_LAYER_INPUT = "second-layer-input"


class Command(StrEnum):
    """CLI commands."""

    TRAIN = "train"
    FINETUNE = "finetune"
    EVAL = "eval"
    TRACE = "trace"
    FLOPS_REPORT = "flops-report"
    ACTIVATION_MATRIX = "activation-matrix"
    PRINT_CONFIG = "print-config"


class Recipe(StrEnum):
    """Named training recipes."""

    DESK = "desk"
    CIFAR10 = "cifar10"
    IMAGENET = "imagenet"


# Recipe presets for the training section
RECIPES: Final[dict[Recipe, dict[str, float | int]]] = {
    Recipe.DESK: {
        CONF_EPOCHS: 30,
        CONF_BATCH_SIZE: 96,
        CONF_BACKBONE_LR: 0.01,
        CONF_GATE_LR: 0.01,
        CONF_DECAY_PERIOD: 10,
    },
    Recipe.CIFAR10: {
        CONF_EPOCHS: 270,
        CONF_BATCH_SIZE: 96,
        CONF_BACKBONE_LR: 0.01,
        CONF_GATE_LR: 0.01,
        CONF_DECAY_PERIOD: 90,
    },
    Recipe.IMAGENET: {
        CONF_EPOCHS: 120,
        CONF_BATCH_SIZE: 256,
        CONF_BACKBONE_LR: 0.005,
        CONF_GATE_LR: 0.00001,
        CONF_DECAY_PERIOD: 30,
    },
}
