"""Training regimes: plain backbone, head-only on a frozen backbone, and
joint training under the ramped head-weighted loss.

All stochasticity (shuffling, augmentation) is driven by one seeded
generator, so a config + seed pair reproduces final parameters
bit-for-bit.  Metrics are per-epoch rows: epoch, head_index, split,
accuracy, loss — head indices count internal heads from 0 with the final
classifier last (a plain backbone run has the single head 0).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, adam_update, softmax_cross_entropy
from .data import LabeledDataset, augment_batch
from .errors import ConfigurationError, InternalError
from .graph import Backbone
from .sdn import SdnModel

logger = logging.getLogger(__name__)

REGIMES = ("backbone", "ic_only", "sdn")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "backbone"
    epochs: int = 15
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (8, 12)
    lr_decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    hflip: bool = False
    tau_start: float = 0.01

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown training regime {self.regime!r}")
        if self.epochs < 1:
            raise ConfigurationError(f"need at least one epoch, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"bad batch size {self.batch_size}")

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for d in self.lr_decay_epochs if epoch >= d)
        return self.lr * self.lr_decay_factor**decays


@dataclass(frozen=True)
class TauSchedule:
    """Per-head loss weights ramping linearly from a small start value up to
    each head's relative inference cost over the training run."""

    end_values: tuple[float, ...]  # one per internal head: its cost fraction
    epochs: int
    start: float = 0.01

    def tau_at(self, ic_index: int, epoch: int) -> float:
        if not (0 <= ic_index < len(self.end_values)):
            raise InternalError(f"head index {ic_index} out of range")
        if not (0 <= epoch < self.epochs):
            raise InternalError(f"epoch {epoch} outside [0, {self.epochs})")
        end = self.end_values[ic_index]
        if self.epochs == 1:
            return end
        return self.start + (end - self.start) * epoch / (self.epochs - 1)

    def taus(self, epoch: int) -> list[float]:
        return [self.tau_at(i, epoch) for i in range(len(self.end_values))]


def tau_at(schedule: TauSchedule, ic_index: int, epoch: int) -> float:
    return schedule.tau_at(ic_index, epoch)


def sdn_loss(final_loss: Tensor, ic_losses: list[Tensor], taus: list[float]) -> Tensor:
    """final loss + sum of tau-weighted internal head losses."""
    if len(ic_losses) != len(taus):
        raise InternalError(f"{len(ic_losses)} head losses but {len(taus)} weights")
    total = final_loss
    for loss, tau in zip(ic_losses, taus):
        total = ad.add(total, ad.scale(loss, tau))
    return total


class Adam:
    """Tracks one shared step count over a fixed parameter set."""

    def __init__(self, params: dict[str, Parameter], config: TrainConfig):
        self.params = params
        self.config = config
        self.step_count = 0

    def step(self, lr: float) -> None:
        self.step_count += 1
        cfg = self.config
        for p in self.params.values():
            if p.frozen or p.grad is None:
                continue
            adam_update(p, p.grad, lr, cfg.beta1, cfg.beta2, cfg.eps, self.step_count)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class MetricRow:
    epoch: int
    head_index: int
    split: str
    accuracy: float
    loss: float


@dataclass
class TrainResult:
    metrics: list[MetricRow] = field(default_factory=list)

    def final_accuracy(self, split: str = "test") -> float:
        rows = [r for r in self.metrics if r.split == split]
        if not rows:
            raise InternalError(f"no metrics for split {split!r}")
        last_epoch = max(r.epoch for r in rows)
        final_head = max(r.head_index for r in rows)
        for r in rows:
            if r.epoch == last_epoch and r.head_index == final_head:
                return r.accuracy
        raise InternalError("missing final head metric")

    def head_accuracies(self, split: str = "test", epoch: int | None = None) -> list[float]:
        rows = [r for r in self.metrics if r.split == split]
        if epoch is None:
            epoch = max(r.epoch for r in rows)
        picked = sorted((r.head_index, r.accuracy) for r in rows if r.epoch == epoch)
        return [a for _, a in picked]


def write_metrics_csv(rows: list[MetricRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "head_index", "split", "accuracy", "loss"])
        for r in rows:
            writer.writerow([r.epoch, r.head_index, r.split, f"{r.accuracy:.6f}", f"{r.loss:.6f}"])


def _heads_forward(model, x: Tensor) -> list[Tensor]:
    if isinstance(model, SdnModel):
        return model.forward_heads(x)
    return [model.forward(x)]


def evaluate_heads(model, dataset: LabeledDataset, batch_size: int = 128) -> tuple[list[float], list[float]]:
    """Accuracy and mean loss per head over a labeled dataset."""
    n = len(dataset)
    num_heads = model.num_ics + 1 if isinstance(model, SdnModel) else 1
    correct = np.zeros(num_heads, dtype=np.int64)
    loss_sum = np.zeros(num_heads)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x = Tensor(dataset.images[idx])
        y = dataset.labels[idx]
        for h, logits in enumerate(_heads_forward(model, x)):
            loss, probs = softmax_cross_entropy(logits, y)
            correct[h] += int((probs.argmax(axis=1) == y).sum())
            loss_sum[h] += loss.item() * len(idx)
    return (correct / n).tolist(), (loss_sum / n).tolist()


def _check_regime(model, config: TrainConfig) -> None:
    if config.regime == "backbone":
        if not isinstance(model, Backbone):
            raise ConfigurationError("backbone regime trains a plain Backbone")
    else:
        if not isinstance(model, SdnModel):
            raise ConfigurationError(f"{config.regime} regime needs an SdnModel with attached heads")
        if config.regime == "ic_only" and not model.backbone.trained:
            logger.warning(
                "head-only training on an untrained backbone is permitted but will "
                "yield poor head accuracy"
            )


def train(model, train_set: LabeledDataset, config: TrainConfig,
          test_set: LabeledDataset | None = None) -> TrainResult:
    """Run one training regime; the model is updated in place.

    head-only: backbone parameters are frozen and provably untouched.
    joint: every head contributes its tau-weighted loss each batch.
    """
    _check_regime(model, config)
    rng = np.random.default_rng(config.seed)
    result = TrainResult()

    schedule = None
    if config.regime == "ic_only":
        model.freeze_backbone()
        params = {}
        for i, ic in enumerate(model.ics, start=1):
            params.update(ic.named_parameters(f"ic{i}"))
    elif config.regime == "sdn":
        schedule = TauSchedule(
            end_values=tuple(model.placement_fractions()),
            epochs=config.epochs,
            start=config.tau_start,
        )
        params = model.named_parameters()
    else:
        params = model.named_parameters()

    optimizer = Adam(params, config)
    n = len(train_set)

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        taus = schedule.taus(epoch) if schedule is not None else None
        order = rng.permutation(n)
        num_heads = model.num_ics + 1 if isinstance(model, SdnModel) else 1
        seen = 0
        correct = np.zeros(num_heads, dtype=np.int64)
        loss_sum = np.zeros(num_heads)

        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            images = train_set.images[idx]
            if config.augment:
                images = augment_batch(images, rng, hflip=config.hflip)
            x = Tensor(images)
            y = train_set.labels[idx]

            heads = _heads_forward(model, x)
            losses = []
            for h, logits in enumerate(heads):
                loss, probs = softmax_cross_entropy(logits, y)
                losses.append(loss)
                correct[h] += int((probs.argmax(axis=1) == y).sum())
                loss_sum[h] += loss.item() * len(idx)
            seen += len(idx)

            if config.regime == "backbone":
                total = losses[0]
            elif config.regime == "ic_only":
                total = losses[0]
                for loss in losses[1:-1]:
                    total = ad.add(total, loss)
            else:
                total = sdn_loss(losses[-1], losses[:-1], taus)

            optimizer.zero_grad()
            total.backward()
            optimizer.step(lr)

        for h in range(num_heads):
            result.metrics.append(
                MetricRow(epoch, h, "train", correct[h] / seen, loss_sum[h] / seen)
            )
        if test_set is not None:
            accs, losses_eval = evaluate_heads(model, test_set, config.batch_size)
            for h in range(num_heads):
                result.metrics.append(MetricRow(epoch, h, "test", accs[h], losses_eval[h]))

    if isinstance(model, SdnModel):
        model.backbone.trained = True
    else:
        model.trained = True
    return result
