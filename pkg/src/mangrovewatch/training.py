"""
Optimisation recipe for the segmentation network.

Loss is label-smoothed cross-entropy plus Dice, optimised with AdamW under a
cosine schedule with warm restarts stepped once per epoch. Training stops
early once validation mIoU has failed to improve for ``patience`` epochs, and
the best-scoring weights are kept.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from mangrovewatch.dataset import TileSample, augment, collate, sample_rng, stratified_batches
from mangrovewatch.errors import TrainingDivergedError, UndefinedLossError
from mangrovewatch.evaluate import ConfusionMatrix, confusion_counts, metrics
from mangrovewatch.model import Checkpoint, ModelConfig, foreground_logit, primary_output

LOGGER = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-3
    lr_min: float = 1e-5
    T0: int = 2
    T_mult: int = 2
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    label_smoothing: float = 0.1
    loss_weights: tuple[float, float] = (1.0, 1.0)
    dice_eps: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.loss_weights = tuple(self.loss_weights)
        self.betas = tuple(self.betas)
        if not self.lr_min < self.lr0:
            raise ValueError("lr_min must be below lr0")
        if self.T0 < 1 or self.T_mult < 1 or self.patience < 1:
            raise ValueError("T0, T_mult and patience must all be >= 1")
        if not 0 <= self.label_smoothing < 0.5:
            raise ValueError("label_smoothing must lie in [0, 0.5)")


# ------------------------------------------------------------------------ losses


def _valid_tensor(targets: torch.Tensor, valid) -> torch.Tensor:
    if valid is None:
        return torch.ones_like(targets, dtype=torch.bool)
    return torch.as_tensor(valid, dtype=torch.bool)


def soft_cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, smoothing: float = 0.1, valid=None
) -> torch.Tensor:
    """Cross-entropy against smoothed targets y(1 - s) + s/2, mean over valid pixels.

    ``logits`` is [B, 1, H, W] (sigmoid head) or [B, 2, H, W] (softmax head);
    ``targets`` is [B, H, W] in {0, 1}.
    """
    targets = targets.to(logits.dtype)
    mask = _valid_tensor(targets, valid)
    if not mask.any():
        raise UndefinedLossError("no valid pixels to average the loss over")
    soft = targets * (1 - smoothing) + smoothing / 2
    if logits.shape[1] == 1:
        z = logits[:, 0]
        per_pixel = nn.functional.binary_cross_entropy_with_logits(z, soft, reduction="none")
    else:
        logp = torch.log_softmax(logits, dim=1)
        per_pixel = -(soft * logp[:, 1] + (1 - soft) * logp[:, 0])
    return per_pixel[mask].mean()


def dice_loss(probabilities: torch.Tensor, targets: torch.Tensor, eps: float = 1.0, valid=None) -> torch.Tensor:
    """1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps) over valid pixels of the whole batch."""
    targets = targets.to(probabilities.dtype)
    mask = _valid_tensor(targets, valid)
    p = probabilities[mask]
    y = targets[mask]
    return 1 - (2 * (p * y).sum() + eps) / (p.sum() + y.sum() + eps)


def combined_loss(logits, targets, config: TrainConfig, valid=None) -> torch.Tensor:
    """Weighted sum; deep-supervision output lists average the loss over heads."""
    if isinstance(logits, (list, tuple)):
        return sum(combined_loss(lg, targets, config, valid) for lg in logits) / len(logits)
    ce_w, dice_w = config.loss_weights
    total = logits.new_zeros(())
    if ce_w:
        total = total + ce_w * soft_cross_entropy(logits, targets, config.label_smoothing, valid)
    if dice_w:
        probs = torch.sigmoid(foreground_logit(logits))
        total = total + dice_w * dice_loss(probs, targets, config.dice_eps, valid)
    return total


# ---------------------------------------------------------------------- schedule


def restart_epochs(config: TrainConfig, up_to: float) -> list[int]:
    """Cumulative epochs at which a new cosine period begins (excluding 0)."""
    out, start, period = [], 0, config.T0
    while start + period <= up_to:
        start += period
        out.append(start)
        period *= config.T_mult
    return out


def cosine_lr(t: float, period: float, lr0: float, lr_min: float) -> float:
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * t / period))


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Learning rate at (possibly fractional) epoch under cosine warm restarts."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    start, period = 0.0, float(config.T0)
    if config.T_mult == 1:
        start = math.floor(epoch / period) * period
    else:
        while epoch >= start + period:
            start += period
            period *= config.T_mult
    return cosine_lr(epoch - start, period, config.lr0, config.lr_min)


# ---------------------------------------------------------------- early stopping


@dataclass
class EarlyStopState:
    best_miou: float = 0.0
    best_epoch: int | None = None
    epochs_since_improve: int = 0


def early_stop_update(
    state: EarlyStopState, epoch: int, epoch_miou: float, patience: int = 10
) -> tuple[EarlyStopState, bool]:
    """Strict improvement resets the counter; stop once it reaches ``patience``."""
    if state.best_epoch is None or epoch_miou > state.best_miou:
        new = EarlyStopState(epoch_miou, epoch, 0)
    else:
        new = EarlyStopState(state.best_miou, state.best_epoch, state.epochs_since_improve + 1)
    return new, new.epochs_since_improve >= patience


# ---------------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_miou: float
    lr: float


@dataclass
class TrainingCurve:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_miou", "lr"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.val_miou:.8f}", f"{r.lr:.10g}"])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> TrainingCurve:
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_miou"]), float(r["lr"])) for r in rows]
        )

    def plot(self, path: str | Path) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        epochs = [r.epoch for r in self.records]
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(epochs, [r.train_loss for r in self.records], color="tab:red", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.val_miou for r in self.records], color="tab:blue", label="val mIoU")
        ax2.set_ylabel("validation mIoU")
        fig.legend(loc="center right")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path


@torch.no_grad()
def evaluate_samples(model: nn.Module, samples: Sequence[TileSample], batch_size: int = 8) -> ConfusionMatrix:
    """Pixel confusion counts over tiles, model in eval mode."""
    was_training = model.training
    model.eval()
    total = ConfusionMatrix(0, 0, 0, 0)
    try:
        for k in range(0, len(samples), batch_size):
            images, labels, valid = collate(samples[k : k + batch_size])
            logits = foreground_logit(primary_output(model(torch.from_numpy(images))))
            pred = (logits > 0).numpy()
            total = total + confusion_counts(pred, labels.astype(bool), valid)
    finally:
        model.train(was_training)
    return total


def validation_miou(model: nn.Module, samples: Sequence[TileSample]) -> float:
    value = metrics(evaluate_samples(model, samples))["miou"]
    return 0.0 if math.isnan(value) else value


def _prepare_batch(batch: Sequence[TileSample], seed: int, epoch: int, offset: int, do_augment: bool, pool):
    if do_augment:
        rngs = [sample_rng(seed, epoch, offset + i) for i in range(len(batch))]
        if pool is not None:
            batch = list(pool.map(augment, batch, rngs))
        else:
            batch = [augment(s, r) for s, r in zip(batch, rngs)]
    return collate(batch)


def train(
    model: nn.Module,
    train_set: Sequence[TileSample],
    val_set: Sequence[TileSample],
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
    workers: int = 1,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    provenance: dict | None = None,
) -> tuple[Checkpoint, TrainingCurve]:
    """Run the full recipe; returns the best checkpoint and the per-epoch curve.

    Results depend only on the model's initial weights, the data and
    ``config.seed``; ``workers`` only changes how augmentation is scheduled.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must both be non-empty")
    torch.manual_seed(config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr0, betas=config.betas, weight_decay=config.weight_decay
    )
    batch_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA7C4]))
    state = EarlyStopState()
    curve = TrainingCurve()
    best_state = copy.deepcopy(model.state_dict())
    model_cfg = getattr(model, "config", ModelConfig())
    train_cfg = asdict(config)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            lr = lr_at(epoch - 1, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            loss_sum, n_seen, offset = 0.0, 0, 0
            for b, batch in enumerate(stratified_batches(train_set, config.batch_size, batch_rng)):
                images, labels, valid = _prepare_batch(batch, config.seed, epoch, offset, config.augment, pool)
                offset += len(batch)
                optimizer.zero_grad()
                output = model(torch.from_numpy(images))
                loss = combined_loss(output, torch.from_numpy(labels), config, valid)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, b, float(loss.detach()))
                loss.backward()
                optimizer.step()
                loss_sum += float(loss.detach()) * len(batch)
                n_seen += len(batch)
            miou = validation_miou(model, val_set)
            record = EpochRecord(epoch, loss_sum / n_seen, miou, lr)
            curve.records.append(record)
            state, stop = early_stop_update(state, epoch, miou, config.patience)
            if state.best_epoch == epoch:
                best_state = copy.deepcopy(model.state_dict())
                if checkpoint_path is not None:
                    Checkpoint(best_state, model_cfg, epoch, miou, train_cfg, provenance or {}).save(checkpoint_path)
            LOGGER.info("epoch %d loss %.4f val mIoU %.4f lr %.2e", epoch, record.train_loss, miou, lr)
            if on_epoch:
                on_epoch(record)
            if stop:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    model.load_state_dict(best_state)
    best = Checkpoint(best_state, model_cfg, state.best_epoch, state.best_miou, train_cfg, provenance or {})
    return best, curve
