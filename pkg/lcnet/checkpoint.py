"""Checkpoint persistence: a JSON manifest next to a raw float32 payload."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import ModelConfig
from .const import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MANIFEST, CHECKPOINT_PAYLOAD
from .data import NormalizationStats
from .errors import CheckpointError
from .network import NetworkSpec, build_network, load_state_arrays, state_arrays

_LOGGER = logging.getLogger(__name__)

PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    """A loaded network with the statistics and metadata saved alongside it."""

    net: NetworkSpec
    stats: NormalizationStats | None = None
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    net: NetworkSpec,
    path: str | Path,
    stats: NormalizationStats | None = None,
    metadata: dict[str, Any] | None = None,
) -> Path:
    """Write ``manifest.json`` and ``payload.bin`` into the directory ``path``."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    chunks = []
    offset = 0
    for name, array in state_arrays(net).items():
        chunk = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes()
        tensors.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(chunk)
        offset += len(chunk)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "network": net.config.to_dict(),
        "normalization": stats.to_dict() if stats is not None else None,
        "tensors": tensors,
        "payload_bytes": offset,
        "metadata": metadata or {},
    }
    (directory / CHECKPOINT_PAYLOAD).write_bytes(b"".join(chunks))
    (directory / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _LOGGER.info(
        "Saved checkpoint with %d tensors (%d bytes) to %s", len(tensors), offset, directory
    )
    return directory


def _read_manifest(directory: Path) -> dict[str, Any]:
    manifest_path = directory / CHECKPOINT_MANIFEST
    if not manifest_path.is_file():
        raise CheckpointError(f"No checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"Unreadable manifest {manifest_path}: {err}") from err
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint format version {version} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return manifest


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild the network stored in the directory ``path``.

    Raises:
        CheckpointError: On a version mismatch, a tensor whose shape or name
            disagrees with the network, or a payload shorter than declared
    """
    directory = Path(path)
    manifest = _read_manifest(directory)
    config = ModelConfig.from_dict(manifest["network"])
    try:
        net = build_network(config)
    except ValueError as err:
        raise CheckpointError(f"Invalid network in manifest: {err}") from err
    expected = state_arrays(net)

    payload_path = directory / CHECKPOINT_PAYLOAD
    if not payload_path.is_file():
        raise CheckpointError(f"Missing checkpoint payload {payload_path}")
    payload = payload_path.read_bytes()

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in expected:
            raise CheckpointError(f"Tensor '{name}' does not belong to the network")
        if shape != expected[name].shape:
            raise CheckpointError(
                f"Tensor '{name}' has shape {shape} in the manifest, "
                f"network expects {expected[name].shape}"
            )
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        stop = start + count * PAYLOAD_DTYPE.itemsize
        if stop > len(payload):
            raise CheckpointError(
                f"Short payload: tensor '{name}' needs bytes {start}..{stop}, "
                f"payload has {len(payload)}"
            )
        arrays[name] = np.frombuffer(
            payload, dtype=PAYLOAD_DTYPE, count=count, offset=start
        ).reshape(shape)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise CheckpointError(f"Manifest lacks tensor(s): {', '.join(missing)}")
    if len(payload) != manifest.get("payload_bytes", len(payload)):
        raise CheckpointError(
            f"Payload is {len(payload)} bytes, manifest declares {manifest['payload_bytes']}"
        )
    load_state_arrays(net, arrays)

    normalization = manifest.get("normalization")
    stats = NormalizationStats.from_dict(normalization) if normalization else None
    _LOGGER.info("Loaded checkpoint with %d tensors from %s", len(arrays), directory)
    return Checkpoint(net=net, stats=stats, metadata=manifest.get("metadata", {}))
