"""Training tiles: cutting, class bookkeeping, splitting, augmentation, batching."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mangrovewatch.errors import ConfigurationError, DataAvailabilityError, DependencyError, SchemaError
from mangrovewatch.raster import MultispectralScene, RasterGrid, check_aligned

TILE_SIZE = 256
# L2A digital numbers -> reflectance
REFLECTANCE_SCALE = 10_000.0
# on-disk label value for pixels excluded from loss and metrics
IGNORE_LABEL = 255
INDEX_VERSION = 1


@dataclass
class TileSample:
    image: np.ndarray  # (C, H, W) float32, scaled reflectance, 0 where invalid
    label: np.ndarray  # (H, W) uint8 in {0, 1}
    origin: tuple[str, int, int]  # (scene id, row offset, col offset)
    stratum: str = "0"
    valid: np.ndarray | None = None  # (H, W) bool; None means every pixel counts

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.label.shape:
            raise SchemaError(f"image {self.image.shape} and label {self.label.shape} disagree")
        if self.valid is None:
            self.valid = np.ones(self.label.shape, dtype=bool)

    @property
    def has_mangrove(self) -> bool:
        return bool((self.label[self.valid] > 0).any())

    @property
    def key(self) -> str:
        scene, row, col = self.origin
        return f"{scene}_r{row:05d}_c{col:05d}"


@dataclass
class DatasetIndex:
    samples: list[TileSample]
    with_mangrove: list[TileSample]
    without_mangrove: list[TileSample]

    @property
    def pct_with(self) -> float:
        return round(100.0 * len(self.with_mangrove) / len(self.samples), 2) if self.samples else float("nan")

    @property
    def pct_without(self) -> float:
        return round(100.0 * len(self.without_mangrove) / len(self.samples), 2) if self.samples else float("nan")

    def summary(self) -> dict:
        return {
            "total": len(self.samples),
            "with_mangrove": len(self.with_mangrove),
            "without_mangrove": len(self.without_mangrove),
            "pct_with_mangrove": self.pct_with,
            "pct_without_mangrove": self.pct_without,
        }


@dataclass(frozen=True)
class SplitSpec:
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


def scene_to_array(
    scene: MultispectralScene, scale: float = REFLECTANCE_SCALE
) -> tuple[np.ndarray, np.ndarray]:
    """Model-ready (C, H, W) float32 array and its (H, W) validity mask.

    Pixels missing in any band are zeroed in every channel and flagged invalid.
    """
    invalid = scene.invalid_mask()
    image = scene.stack().astype(np.float32) / np.float32(scale)
    image[:, invalid] = 0.0
    return image, ~invalid


def stratum_of(row: int, col: int, size: int, shape: tuple[int, int], blocks: tuple[int, int]) -> str:
    """Coarse spatial block holding the tile centre, on a ``blocks`` = (rows, cols) grid."""
    h, w = shape
    br = min(int((row + size / 2) * blocks[0] // h), blocks[0] - 1)
    bc = min(int((col + size / 2) * blocks[1] // w), blocks[1] - 1)
    return f"r{br}c{bc}"


def tile_scene(
    scene: MultispectralScene,
    label: RasterGrid,
    size: int = TILE_SIZE,
    stride: int = TILE_SIZE,
    scale: float = REFLECTANCE_SCALE,
    strata_blocks: tuple[int, int] = (2, 2),
) -> list[TileSample]:
    """Cut every fully-inside ``size`` x ``size`` window on the stride lattice.

    Windows with no valid image pixel are dropped; label nodata pixels become
    invalid (excluded from loss and metrics) and read as background.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    check_aligned(scene.bands[0], label, what="label")
    h, w = scene.shape
    if h < size or w < size:
        return []
    image, valid = scene_to_array(scene, scale)
    label_valid = label.valid_mask()
    lab = np.where(label_valid, label.values, 0)
    if not np.isin(np.unique(lab), (0, 1)).all():
        raise SchemaError("label raster must be binary (0/1) outside nodata")
    lab = lab.astype(np.uint8)
    valid = valid & label_valid

    samples = []
    for r in range(0, h - size + 1, stride):
        for c in range(0, w - size + 1, stride):
            win_valid = valid[r : r + size, c : c + size]
            if not win_valid.any():
                continue
            samples.append(
                TileSample(
                    image=image[:, r : r + size, c : c + size].copy(),
                    label=lab[r : r + size, c : c + size].copy(),
                    origin=(scene.scene_id, r, c),
                    stratum=stratum_of(r, c, size, (h, w), strata_blocks),
                    valid=win_valid.copy(),
                )
            )
    return samples


def partition_by_content(samples: Sequence[TileSample]) -> DatasetIndex:
    samples = list(samples)
    pos = [s for s in samples if s.has_mangrove]
    neg = [s for s in samples if not s.has_mangrove]
    return DatasetIndex(samples, pos, neg)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(index: DatasetIndex, spec: SplitSpec) -> tuple[list[TileSample], list[TileSample]]:
    """Validation tiles come only from mangrove-bearing tiles; everything else trains."""
    n_pos = len(index.with_mangrove)
    if n_pos == 0:
        raise DataAvailabilityError("no mangrove-bearing tiles to draw a validation set from")
    n_val = _round_half_up(spec.val_fraction * n_pos)
    if n_val == 0:
        raise ConfigurationError(
            f"val_fraction {spec.val_fraction} of {n_pos} mangrove tiles rounds to an empty validation set"
        )
    rng = np.random.default_rng(spec.seed)
    picked = set(rng.choice(n_pos, size=n_val, replace=False).tolist())
    val = [s for i, s in enumerate(index.with_mangrove) if i in picked]
    train = [s for i, s in enumerate(index.with_mangrove) if i not in picked]
    train += index.without_mangrove
    return train, val


def apply_transform(sample: TileSample, hflip: bool, vflip: bool, k: int) -> TileSample:
    """Flip columns, flip rows, then rotate by ``k`` quarter turns, identically on every layer."""

    def tf(a: np.ndarray) -> np.ndarray:
        if hflip:
            a = a[..., :, ::-1]
        if vflip:
            a = a[..., ::-1, :]
        if k % 4:
            a = np.rot90(a, k, axes=(-2, -1))
        return np.ascontiguousarray(a)

    return TileSample(tf(sample.image), tf(sample.label), sample.origin, sample.stratum, tf(sample.valid))


def augment(sample: TileSample, rng: np.random.Generator) -> TileSample:
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    k = int(rng.integers(4))
    return apply_transform(sample, hflip, vflip, k)


def sample_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample position); worker layout cannot change it."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, position]))


def _largest_remainder(size: int, weights: dict[str, int], order: list[str]) -> dict[str, int]:
    total = sum(weights.values())
    exact = {k: size * weights[k] / total for k in order}
    quota = {k: int(math.floor(exact[k])) for k in order}
    short = size - sum(quota.values())
    # stable sort keeps ``order`` as the tie-break among equal remainders
    for k in sorted(order, key=lambda k: exact[k] - quota[k], reverse=True)[:short]:
        quota[k] += 1
    return quota


def stratified_batches(
    samples: Sequence[TileSample], batch_size: int = 16, rng: np.random.Generator | None = None
) -> list[list[TileSample]]:
    """One epoch of batches covering every sample exactly once.

    Each batch draws from every stratum in proportion to what that stratum still
    holds (largest-remainder rounding), which keeps each batch's mix at the
    global stratum frequencies; the last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = rng or np.random.default_rng()
    pools: dict[str, list[TileSample]] = defaultdict(list)
    for s in samples:
        pools[s.stratum].append(s)
    names = sorted(pools)
    for name in names:
        perm = rng.permutation(len(pools[name]))
        pools[name] = [pools[name][i] for i in perm]

    batches = []
    remaining = len(samples)
    while remaining:
        size = min(batch_size, remaining)
        left = {k: len(pools[k]) for k in names if pools[k]}
        order = [names[i] for i in rng.permutation(len(names)) if names[i] in left]
        quota = _largest_remainder(size, left, order)
        batch = []
        for k in order:
            take, pools[k] = pools[k][: quota[k]], pools[k][quota[k] :]
            batch.extend(take)
        batch = [batch[i] for i in rng.permutation(len(batch))]
        batches.append(batch)
        remaining -= size
    return batches


def collate(batch: Sequence[TileSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in batch]).astype(np.float32)
    labels = np.stack([s.label for s in batch]).astype(np.float32)
    valid = np.stack([s.valid for s in batch])
    return images, labels, valid


# ------------------------------------------------------------------- tile store


def save_tiles(directory: str | Path, samples: Sequence[TileSample], provenance: dict | None = None) -> Path:
    """Write ``<key>_image.npy`` / ``<key>_label.npy`` pairs plus ``index.json``.

    Invalid pixels are stored in the label file as 255.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        img_name, lab_name = f"{s.key}_image.npy", f"{s.key}_label.npy"
        np.save(directory / img_name, s.image.astype(np.float32))
        lab = np.where(s.valid, s.label, IGNORE_LABEL).astype(np.uint8)
        np.save(directory / lab_name, lab)
        records.append(
            {
                "image": img_name,
                "label": lab_name,
                "scene_id": s.origin[0],
                "row": s.origin[1],
                "col": s.origin[2],
                "stratum": s.stratum,
                "has_mangrove": s.has_mangrove,
            }
        )
    doc = {"version": INDEX_VERSION, "provenance": provenance or {}, "count": len(records), "tiles": records}
    path = directory / "index.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_tiles(directory: str | Path) -> list[TileSample]:
    directory = Path(directory)
    path = directory / "index.json"
    if not path.exists():
        raise DependencyError(f"missing tile index: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != INDEX_VERSION:
        raise SchemaError(f"{path}: unsupported tile index version {doc.get('version')}")
    out = []
    for rec in doc["tiles"]:
        lab = np.load(directory / rec["label"])
        valid = lab != IGNORE_LABEL
        out.append(
            TileSample(
                image=np.load(directory / rec["image"]),
                label=np.where(valid, lab, 0).astype(np.uint8),
                origin=(rec["scene_id"], rec["row"], rec["col"]),
                stratum=rec["stratum"],
                valid=valid,
            )
        )
    return out
