"""Training loop coordinator and evaluation helpers."""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .blocks import BlockTraceEntry
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .const import CHECKPOINT_BEST, CHECKPOINT_FINAL, ExecutionMode
from .data import BatchIterator, Dataset, NormalizationStats
from .errors import DataError, NumericError
from .network import (
    NetworkSpec,
    network_forward,
    parameter_groups,
    predictions,
    state_arrays,
    top_k_accuracy,
    total_loss,
)
from .nn_ops import cross_entropy
from .optim import ParamGroup, SGDNesterov, lr_at_epoch
from .tensor import Tensor, backward, no_grad

_LOGGER = logging.getLogger(__name__)


@dataclass
class GateStatistics:
    """Aggregated gate behaviour over a set of instances."""

    mean_block_salience: float = 0.0
    block_skip_rate: float = 0.0
    channel_sparsity: float = 0.0
    gate_sparsity: float = 0.0
    block_execution_rates: list[float] = field(default_factory=list)
    channel_activation_rates: list[float] = field(default_factory=list)

    @classmethod
    def from_entries(cls, per_block: list[list[BlockTraceEntry]]) -> GateStatistics:
        """Aggregate trace entries collected batch by batch for each block."""
        if not per_block or not per_block[0]:
            return cls()
        block_scores = [
            np.concatenate([e.salience.block_salience.data for e in entries])
            for entries in per_block
        ]
        channel_scores = [
            np.concatenate([e.salience.channel_salience.data for e in entries])
            for entries in per_block
        ]
        all_block = np.concatenate(block_scores)
        all_channel = np.concatenate([c.ravel() for c in channel_scores])
        zeros = np.count_nonzero(all_block == 0) + np.count_nonzero(all_channel == 0)
        return cls(
            mean_block_salience=float(all_block.mean()),
            block_skip_rate=float(np.mean(all_block == 0)),
            channel_sparsity=float(np.mean(all_channel == 0)),
            gate_sparsity=float(zeros / (all_block.size + all_channel.size)),
            block_execution_rates=[float(np.mean(s > 0)) for s in block_scores],
            channel_activation_rates=[float(np.mean(c > 0)) for c in channel_scores],
        )


@dataclass
class EvalResult:
    """Accuracy, loss and gate statistics of one pass over a dataset."""

    top1: float
    top5: float
    loss: float
    predictions: np.ndarray
    gates: GateStatistics


def evaluate(
    net: NetworkSpec,
    dataset: Dataset,
    batch_size: int = 256,
    mode: ExecutionMode = ExecutionMode.EVAL_DENSE,
    gated: bool = True,
) -> EvalResult:
    """Run inference over ``dataset`` and aggregate accuracy and gate use."""
    if mode == ExecutionMode.TRAIN:
        raise ValueError("Evaluation runs in an eval mode")
    if len(dataset) == 0:
        raise DataError("Cannot evaluate on an empty dataset")
    all_logits = []
    per_block: list[list[BlockTraceEntry]] = [[] for _ in net.blocks] if gated else []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            images = Tensor(dataset.images[start : start + batch_size])
            logits, entries = network_forward(images, net, mode, gated=gated)
            all_logits.append(logits.data)
            for index, entry in enumerate(entries):
                per_block[index].append(entry)
        logits = np.concatenate(all_logits)
        loss = cross_entropy(Tensor(logits), dataset.labels).item()
    return EvalResult(
        top1=top_k_accuracy(logits, dataset.labels, 1),
        top5=top_k_accuracy(logits, dataset.labels, 5),
        loss=loss,
        predictions=predictions(logits),
        gates=GateStatistics.from_entries(per_block),
    )


@dataclass
class EpochMetrics:
    """One row of the training log."""

    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float
    test_top5: float
    mean_block_salience: float
    channel_sparsity: float
    block_skip_rate: float
    gate_sparsity: float
    backbone_lr: float
    gate_lr: float


def write_metrics_csv(metrics: list[EpochMetrics], path: str | Path) -> Path:
    """Write one row per epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(EpochMetrics.__dataclass_fields__)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for row in metrics:
            writer.writerow(asdict(row))
    return path


class Trainer:
    """Coordinates optimisation of one network over a dataset.

    Gate tensors of ``net`` are set trainable or frozen to match this trainer's
    configuration, so the latest trainer built on a network decides.
    """

    def __init__(
        self,
        net: NetworkSpec,
        train_data: Dataset,
        test_data: Dataset,
        config: TrainConfig,
        augment_crop: bool = False,
        augment_flip: bool = False,
        gated: bool = True,
        output_dir: str | Path | None = None,
        stats: NormalizationStats | None = None,
    ) -> None:
        """Initialize the trainer."""
        self.net = net
        self.train_data = train_data
        self.test_data = test_data
        self.config = config
        self.gated = gated
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.stats = stats
        self.metrics: list[EpochMetrics] = []
        self.best_accuracy = -1.0
        self.best_epoch: int | None = None

        self._batches = BatchIterator(
            train_data,
            config.batch_size,
            config.seed,
            shuffle=True,
            augment_crop=augment_crop,
            augment_flip=augment_flip,
        )
        groups = parameter_groups(net)
        gate_params = [tensor for _, tensor in groups["gate"]]
        trainable_gates = gated and not config.freeze_gates
        for tensor in gate_params:
            tensor.requires_grad = trainable_gates
        if not trainable_gates:
            gate_params = []
        backbone_lr, gate_lr = lr_at_epoch(config, 0)
        self.optimizer = SGDNesterov(
            [
                ParamGroup(
                    "backbone",
                    [tensor for _, tensor in groups["backbone"]],
                    backbone_lr,
                    config.weight_decay,
                ),
                ParamGroup("gate", gate_params, gate_lr, 0.0),
            ],
            config.momentum,
        )

    def train_step(self, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
        """One optimisation step; returns the loss and batch accuracy."""
        self.optimizer.zero_grad()
        logits, traces = network_forward(
            Tensor(images), self.net, ExecutionMode.TRAIN, gated=self.gated, leak=self.config.leak
        )
        loss = total_loss(logits, labels, traces, self.config.l1_lambda)
        loss.assert_finite("loss")
        backward(loss)
        self.optimizer.step()
        return loss.item(), top_k_accuracy(logits.data, labels, 1)

    def train_epoch(self, epoch: int) -> tuple[float, float]:
        """Run every batch of one epoch; returns mean loss and train accuracy."""
        backbone_lr, gate_lr = lr_at_epoch(self.config, epoch)
        self.optimizer.set_lr({"backbone": backbone_lr, "gate": gate_lr})
        losses, correct, seen = [], 0.0, 0
        for step, (images, labels) in enumerate(self._batches.epoch(epoch)):
            loss, accuracy = self.train_step(images, labels)
            losses.append(loss * len(labels))
            correct += accuracy * len(labels)
            seen += len(labels)
            _LOGGER.debug("Epoch %d step %d: loss %.4f", epoch, step, loss)
        if seen == 0:
            raise DataError(f"Epoch {epoch} drew no batches")
        return float(sum(losses) / seen), correct / seen

    def fit(self, on_epoch: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
        """Train for the configured number of epochs."""
        _LOGGER.info(
            "Starting training: %d epochs, %d train / %d test instances, lambda %g",
            self.config.epochs,
            len(self.train_data),
            len(self.test_data),
            self.config.l1_lambda,
        )
        try:
            for epoch in range(self.config.epochs):
                loss, train_accuracy = self.train_epoch(epoch)
                result = evaluate(
                    self.net, self.test_data, self.config.batch_size, gated=self.gated
                )
                backbone_lr, gate_lr = lr_at_epoch(self.config, epoch)
                row = EpochMetrics(
                    epoch=epoch,
                    loss=loss,
                    train_accuracy=train_accuracy,
                    test_accuracy=result.top1,
                    test_top5=result.top5,
                    mean_block_salience=result.gates.mean_block_salience,
                    channel_sparsity=result.gates.channel_sparsity,
                    block_skip_rate=result.gates.block_skip_rate,
                    gate_sparsity=result.gates.gate_sparsity,
                    backbone_lr=backbone_lr,
                    gate_lr=gate_lr,
                )
                self.metrics.append(row)
                _LOGGER.info(
                    "Epoch %d: loss %.4f, train %.3f, test %.3f, gate sparsity %.3f",
                    epoch,
                    loss,
                    train_accuracy,
                    result.top1,
                    result.gates.gate_sparsity,
                )
                if result.top1 > self.best_accuracy:
                    self.best_accuracy = result.top1
                    self.best_epoch = epoch
                    self._save(CHECKPOINT_BEST, epoch, result.top1)
                if on_epoch is not None:
                    on_epoch(row)
        except NumericError:
            _LOGGER.error("Training aborted on a non-finite value", exc_info=True)
            raise
        if self.metrics:
            last = self.metrics[-1]
            self._save(CHECKPOINT_FINAL, last.epoch, last.test_accuracy)
        _LOGGER.info(
            "Training finished: best test accuracy %.3f at epoch %s",
            self.best_accuracy,
            self.best_epoch,
        )
        return self.metrics

    def _save(self, name: str, epoch: int, accuracy: float) -> None:
        if self.output_dir is None:
            return
        save_checkpoint(
            self.net,
            self.output_dir / name,
            self.stats,
            metadata={"epoch": epoch, "test_accuracy": accuracy},
        )

    def state_snapshot(self) -> dict[str, np.ndarray]:
        """Copy of every parameter and running statistic."""
        return {name: array.copy() for name, array in state_arrays(self.net).items()}
