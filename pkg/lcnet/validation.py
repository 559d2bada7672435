"""Validation utilities for run configurations."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import voluptuous as vol

from .config import RunConfig
from .const import (
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
    DEFAULT_BOTTLENECK_EXPANSION,
    DEFAULT_DECAY_FACTOR,
    DEFAULT_EXTREMES_K,
    DEFAULT_HISTOGRAM_BINS,
    DEFAULT_IN_CHANNELS,
    DEFAULT_L1_LAMBDA,
    DEFAULT_LEAK,
    DEFAULT_MATRIX_CHANNELS,
    DEFAULT_MOMENTUM,
    DEFAULT_NUM_CLASSES,
    DEFAULT_SEED,
    DEFAULT_STAGE_DEPTHS,
    DEFAULT_STAGE_WIDTHS,
    DEFAULT_WEIGHT_DECAY,
    RECIPES,
    BlockKind,
    Command,
    DataSource,
    LayerSelector,
    Placement,
    Recipe,
    TrainMode,
)
from .errors import LCNetError

_LOGGER = logging.getLogger(__name__)


class ValidationError(LCNetError):
    """Configuration rejected before any work starts."""

    def __init__(self, message: str, field: str | None = None) -> None:
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


def _choice(enum: Iterable[Any]) -> vol.In:
    return vol.In([str(member) for member in enum])


_POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
_NON_NEGATIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=0))
_POSITIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
_NON_NEGATIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0))
_OPTIONAL_POSITIVE_INT = vol.Any(None, _POSITIVE_INT)
_OPTIONAL_STRING = vol.Any(None, str)

MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_BLOCK_KIND, default=str(BlockKind.BASIC)): _choice(BlockKind),
        vol.Optional(CONF_STAGE_WIDTHS, default=list(DEFAULT_STAGE_WIDTHS)): vol.All(
            [_POSITIVE_INT], vol.Length(min=1)
        ),
        vol.Optional(CONF_STAGE_DEPTHS, default=list(DEFAULT_STAGE_DEPTHS)): vol.All(
            [_POSITIVE_INT], vol.Length(min=1)
        ),
        vol.Optional(CONF_NUM_CLASSES, default=DEFAULT_NUM_CLASSES): vol.All(
            vol.Coerce(int), vol.Range(min=2)
        ),
        vol.Optional(CONF_IN_CHANNELS, default=DEFAULT_IN_CHANNELS): _POSITIVE_INT,
        vol.Optional(CONF_STEM_WIDTH, default=None): _OPTIONAL_POSITIVE_INT,
        vol.Optional(CONF_EXPANSION, default=DEFAULT_BOTTLENECK_EXPANSION): _POSITIVE_INT,
    }
)

DATA_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_SOURCE, default=str(DataSource.SYNTHETIC)): _choice(DataSource),
        vol.Optional(CONF_PATH, default=None): _OPTIONAL_STRING,
        vol.Optional(CONF_TRAIN_SUBSET, default=None): _OPTIONAL_POSITIVE_INT,
        vol.Optional(CONF_TEST_SUBSET, default=None): _OPTIONAL_POSITIVE_INT,
        vol.Optional(CONF_SYNTHETIC_TRAIN, default=1000): _NON_NEGATIVE_INT,
        vol.Optional(CONF_SYNTHETIC_TEST, default=200): _NON_NEGATIVE_INT,
        vol.Optional(CONF_SYNTHETIC_CLASSES, default=DEFAULT_NUM_CLASSES): _POSITIVE_INT,
        vol.Optional(CONF_IMAGE_SIZE, default=32): vol.All(vol.Coerce(int), vol.Range(min=8)),
        vol.Optional(CONF_AUGMENT_CROP, default=True): vol.Boolean(),
        vol.Optional(CONF_AUGMENT_FLIP, default=True): vol.Boolean(),
    }
)

# Epochs, batch size, rates and decay period come from the recipe
TRAIN_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_EPOCHS): _POSITIVE_INT,
        vol.Required(CONF_BATCH_SIZE): _POSITIVE_INT,
        vol.Required(CONF_BACKBONE_LR): _POSITIVE_FLOAT,
        vol.Required(CONF_GATE_LR): _POSITIVE_FLOAT,
        vol.Required(CONF_DECAY_PERIOD): _POSITIVE_INT,
        vol.Optional(CONF_MOMENTUM, default=DEFAULT_MOMENTUM): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)
        ),
        vol.Optional(CONF_WEIGHT_DECAY, default=DEFAULT_WEIGHT_DECAY): _NON_NEGATIVE_FLOAT,
        vol.Optional(CONF_DECAY_FACTOR, default=DEFAULT_DECAY_FACTOR): _POSITIVE_FLOAT,
        vol.Optional(CONF_L1_LAMBDA, default=DEFAULT_L1_LAMBDA): _NON_NEGATIVE_FLOAT,
        vol.Optional(CONF_SEED, default=DEFAULT_SEED): _NON_NEGATIVE_INT,
        vol.Optional(CONF_MODE, default=str(TrainMode.FROM_SCRATCH)): _choice(TrainMode),
        vol.Optional(CONF_LEAK, default=DEFAULT_LEAK): _NON_NEGATIVE_FLOAT,
        vol.Optional(CONF_FREEZE_GATES, default=False): vol.Boolean(),
        vol.Optional(CONF_PRETRAINED, default=None): _OPTIONAL_STRING,
    }
)

EVAL_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_PLACEMENT, default=str(Placement.SEQUENTIAL)): _choice(Placement),
        vol.Optional(CONF_COUNT_GATE_FLOPS, default=True): vol.Boolean(),
        vol.Optional(CONF_EXTREMES_K, default=DEFAULT_EXTREMES_K): _POSITIVE_INT,
        vol.Optional(CONF_HISTOGRAM_BINS, default=DEFAULT_HISTOGRAM_BINS): _POSITIVE_INT,
        vol.Optional(CONF_BLOCK_INDEX, default=0): _NON_NEGATIVE_INT,
        vol.Optional(CONF_LAYER, default=str(LayerSelector.SECOND_LAYER_INPUT)): _choice(
            LayerSelector
        ),
        vol.Optional(CONF_MAX_CHANNELS, default=DEFAULT_MATRIX_CHANNELS): _OPTIONAL_POSITIVE_INT,
        vol.Optional(CONF_MAX_INSTANCES, default=None): _OPTIONAL_POSITIVE_INT,
    }
)

RUN_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_RECIPE, default=str(Recipe.DESK)): _choice(Recipe),
        vol.Optional(CONF_MODEL, default=dict): MODEL_SCHEMA,
        vol.Optional(CONF_DATA, default=dict): DATA_SCHEMA,
        vol.Required(CONF_TRAIN): TRAIN_SCHEMA,
        vol.Optional(CONF_EVAL, default=dict): EVAL_SCHEMA,
        vol.Optional(CONF_OUTPUT_DIR, default="runs"): str,
        vol.Optional(CONF_CHECKPOINT, default=None): _OPTIONAL_STRING,
    }
)

_SECTION_SCHEMAS: dict[str, vol.Schema] = {
    CONF_MODEL: MODEL_SCHEMA,
    CONF_DATA: DATA_SCHEMA,
    CONF_TRAIN: TRAIN_SCHEMA,
    CONF_EVAL: EVAL_SCHEMA,
}


def _schema_keys(schema: vol.Schema) -> set[str]:
    return {str(key.schema) for key in schema.schema}


def _drop_unknown_keys(raw: dict[str, Any]) -> dict[str, Any]:
    """Return a copy without keys no schema knows, warning about each."""
    cleaned: dict[str, Any] = {}
    top_level = _schema_keys(RUN_SCHEMA)
    for key, value in raw.items():
        if key not in top_level:
            _LOGGER.warning("Ignoring unknown config key: %s", key)
            continue
        if key in _SECTION_SCHEMAS and isinstance(value, dict):
            known = _schema_keys(_SECTION_SCHEMAS[key])
            for name in sorted(set(value) - known):
                _LOGGER.warning("Ignoring unknown config key: %s.%s", key, name)
            value = {name: item for name, item in value.items() if name in known}
        cleaned[key] = value
    return cleaned


def resolve_recipe(raw: dict[str, Any]) -> dict[str, Any]:
    """Fill the train section from the named recipe, keeping explicit values.

    Raises:
        ValidationError: If the recipe name is unknown or the train section is not a mapping
    """
    name = raw.get(CONF_RECIPE, str(Recipe.DESK))
    try:
        recipe = Recipe(name)
    except ValueError as err:
        raise ValidationError(f"unknown recipe {name!r}", CONF_RECIPE) from err
    train = raw.get(CONF_TRAIN, {})
    if not isinstance(train, dict):
        raise ValidationError("expected a mapping", CONF_TRAIN)
    merged = dict(raw)
    merged[CONF_RECIPE] = str(recipe)
    merged[CONF_TRAIN] = {**RECIPES[recipe], **train}
    return merged


def validate_config(raw: dict[str, Any]) -> dict[str, Any]:
    """Validate a raw configuration mapping against the run schema.

    Args:
        raw: Mapping read from a config file, with overrides applied

    Returns:
        Validated mapping with recipe values and defaults filled in

    Raises:
        ValidationError: Naming the dotted path of the first offending field
    """
    if not isinstance(raw, dict):
        raise ValidationError(f"config must be a mapping, got {type(raw).__name__}")
    resolved = resolve_recipe(_drop_unknown_keys(raw))
    try:
        return RUN_SCHEMA(resolved)
    except vol.MultipleInvalid as err:
        first = err.errors[0]
        field = ".".join(str(part) for part in first.path) or None
        raise ValidationError(first.msg, field) from err


def parse_override(text: str) -> tuple[list[str], Any]:
    """Split ``section.key=value`` into a key path and a JSON-decoded value.

    Values that are not valid JSON are kept as plain strings.
    """
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ValidationError(f"override {text!r} is not of the form key=value", "--set")
    path = [part for part in key.strip().split(".") if part]
    try:
        decoded = json.loads(value)
    except json.JSONDecodeError:
        decoded = value
    return path, decoded


def apply_overrides(raw: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Return a copy of ``raw`` with every ``section.key=value`` override applied."""
    merged = json.loads(json.dumps(raw))
    for text in overrides:
        path, value = parse_override(text)
        target = merged
        for part in path[:-1]:
            child = target.setdefault(part, {})
            if not isinstance(child, dict):
                raise ValidationError(f"cannot set a key inside a {type(child).__name__}", part)
            target = child
        target[path[-1]] = value
        _LOGGER.debug("Override %s = %r", ".".join(path), value)
    return merged


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a JSON config file.

    Raises:
        ValidationError: If the file is missing, unreadable or not a JSON object
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} does not exist", "--config")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path} is not valid JSON: {err}", "--config") from err
    if not isinstance(data, dict):
        raise ValidationError(f"{path} must hold a JSON object", "--config")
    return data


def build_run_config(raw: dict[str, Any], command: Command) -> RunConfig:
    """Validate ``raw`` and turn it into a ``RunConfig`` checked for cross-field rules."""
    config = RunConfig.from_dict(validate_config(raw), command)
    errors = config.validate()
    if errors:
        section, _, message = errors[0].partition(": ")
        for error in errors[1:]:
            _LOGGER.warning("Config error: %s", error)
        raise ValidationError(message or section, section if message else None)
    return config
