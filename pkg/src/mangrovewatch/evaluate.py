"""Pixel-level accuracy for the mangrove class."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from mangrovewatch.errors import AlignmentError
from mangrovewatch.raster import RasterGrid, check_aligned

METRIC_NAMES = ("producer_acc", "user_acc", "f1", "iou_pos", "iou_neg", "miou")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def inverted(self) -> ConfusionMatrix:
        """Counts with background as the positive class."""
        return ConfusionMatrix(self.tn, self.fn, self.fp, self.tp)


def confusion_counts(pred: np.ndarray, truth: np.ndarray, valid: np.ndarray | None = None) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise AlignmentError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        pred, truth = pred[valid], truth[valid]
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionMatrix(tp, fp, fn, tn)


def confusion(pred: RasterGrid | np.ndarray, truth: RasterGrid | np.ndarray) -> ConfusionMatrix:
    """Count agreement between a predicted and a reference mask; truth nodata is skipped."""
    valid = None
    if isinstance(pred, RasterGrid) and isinstance(truth, RasterGrid):
        check_aligned(pred, truth, what="prediction vs truth")
    if isinstance(truth, RasterGrid):
        valid = truth.valid_mask()
        truth = np.where(valid, truth.values, 0)
    if isinstance(pred, RasterGrid):
        pred = pred.values
    return confusion_counts(np.asarray(pred) > 0, np.asarray(truth) > 0, valid)


def _ratio(num: float, den: float) -> float:
    return num / den if den else math.nan


def f1_from(producer: float, user: float) -> float:
    return _ratio(2 * producer * user, producer + user)


def metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Producer/user accuracy, F1, per-class IoU and their mean.

    A metric whose denominator is zero is NaN, never 0. mIoU averages the
    IoUs that are defined.
    """
    producer = _ratio(cm.tp, cm.tp + cm.fn)
    user = _ratio(cm.tp, cm.tp + cm.fp)
    f1 = f1_from(producer, user) if not (math.isnan(producer) or math.isnan(user)) else math.nan
    iou_pos = _ratio(cm.tp, cm.tp + cm.fp + cm.fn)
    iou_neg = _ratio(cm.tn, cm.tn + cm.fp + cm.fn)
    defined = [v for v in (iou_pos, iou_neg) if not math.isnan(v)]
    miou = sum(defined) / len(defined) if defined else math.nan
    return {
        "producer_acc": producer,
        "user_acc": user,
        "f1": f1,
        "iou_pos": iou_pos,
        "iou_neg": iou_neg,
        "miou": miou,
        # informational only
        "overall_acc": _ratio(cm.tp + cm.tn, cm.total),
    }


def _jsonable(value: float):
    return None if isinstance(value, float) and math.isnan(value) else value


def write_report(
    directory: str | Path, cm: ConfusionMatrix, provenance: dict | None = None, stem: str = "evaluation"
) -> tuple[Path, Path]:
    """``<stem>.json`` (counts, metrics, provenance) and ``<stem>.csv`` (metric,value)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    m = metrics(cm)
    doc = {
        "provenance": provenance or {},
        "confusion": asdict(cm),
        "metrics": {k: _jsonable(v) for k, v in m.items()},
    }
    jpath = directory / f"{stem}.json"
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    cpath = directory / f"{stem}.csv"
    with cpath.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in (*METRIC_NAMES, "overall_acc"):
            w.writerow([k, "" if math.isnan(m[k]) else f"{m[k]:.6f}"])
    return jpath, cpath


def plot_triptych(path: str | Path, rgb: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> Path:
    """Image | reference | prediction panels. ``rgb`` is (H, W, 3) in [0, 1]."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    for ax, data, title in zip(axes, (rgb, truth, pred), ("image", "reference", "prediction")):
        ax.imshow(data if data.ndim == 3 else data, cmap=None if data.ndim == 3 else "Greens", vmin=0, vmax=1)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
