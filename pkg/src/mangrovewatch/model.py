"""UNet++ segmentation network, whole-scene inference, checkpoints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mangrovewatch.dataset import REFLECTANCE_SCALE, scene_to_array
from mangrovewatch.errors import ConfigurationError, DependencyError, SchemaError, ShapeError
from mangrovewatch.raster import MultispectralScene, RasterGrid

# Which eleven L2A bands feed the network is a choice, not a given: every
# band but the 60 m atmospheric ones (B1, B10).
DEFAULT_BANDS = ("B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12")

CHECKPOINT_VERSION = 1
ENCODERS = ("builtin-small", "named-backbone")


@dataclass
class ModelConfig:
    in_channels: int = 11
    depth: int = 5
    base_width: int = 32
    deep_supervision: bool = False
    encoder_kind: str = "builtin-small"
    backbone: str = "timm-resnest101e"
    pretrained: bool = False
    out_channels: int = 1
    band_names: list[str] = field(default_factory=lambda: list(DEFAULT_BANDS))

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if self.in_channels < 1 or self.base_width < 1:
            raise ConfigurationError("in_channels and base_width must be >= 1")
        if self.out_channels not in (1, 2):
            raise ConfigurationError("out_channels is 1 (sigmoid) or 2 (softmax)")
        if self.encoder_kind not in ENCODERS:
            raise ConfigurationError(f"encoder_kind must be one of {ENCODERS}")
        if self.band_names and len(self.band_names) != self.in_channels:
            raise ConfigurationError(
                f"{len(self.band_names)} band names for in_channels={self.in_channels}"
            )


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.seq = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.seq(x)


class Up(nn.Module):
    """Bilinear x2 then a 1x1 conv down to the receiving level's width."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.proj(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))


class UNetPlusPlus(nn.Module):
    """Nested UNet with dense skip pathways.

    Node X(i, j) sits at resolution level i (downsampled 2**i) and nesting
    column j. Column 0 is the encoder; X(i, j) for j >= 1 concatenates
    X(i, 0..j-1) with the upsampled X(i+1, j-1).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.depth
        widths = [config.base_width * 2**i for i in range(d)]
        self.widths = widths
        self.pool = nn.MaxPool2d(2)
        self.nodes = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for i in range(d):
            in_ch = config.in_channels if i == 0 else widths[i - 1]
            self.nodes[f"x{i}_0"] = ConvBlock(in_ch, widths[i])
        for j in range(1, d):
            for i in range(d - j):
                self.ups[f"x{i}_{j}"] = Up(widths[i + 1], widths[i])
                self.nodes[f"x{i}_{j}"] = ConvBlock(widths[i] * (j + 1), widths[i])
        n_heads = d - 1 if config.deep_supervision else 1
        self.heads = nn.ModuleList(nn.Conv2d(widths[0], config.out_channels, 1) for _ in range(n_heads))

    @property
    def node_names(self) -> list[str]:
        return list(self.nodes.keys())

    @property
    def divisor(self) -> int:
        return 2 ** (self.config.depth - 1)

    def forward(self, x: torch.Tensor):
        if x.ndim != 4:
            raise ShapeError(f"expected [B, C, H, W], got {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ShapeError(
                f"spatial dims {h}x{w} must be divisible by {self.divisor} (2**(depth-1)) for depth {self.config.depth}"
            )
        d = self.config.depth
        out: dict[tuple[int, int], torch.Tensor] = {}
        for i in range(d):
            inp = x if i == 0 else self.pool(out[i - 1, 0])
            out[i, 0] = self.nodes[f"x{i}_0"](inp)
        for j in range(1, d):
            for i in range(d - j):
                up = self.ups[f"x{i}_{j}"](out[i + 1, j - 1])
                cat = torch.cat([out[i, k] for k in range(j)] + [up], dim=1)
                out[i, j] = self.nodes[f"x{i}_{j}"](cat)
        if self.config.deep_supervision:
            return [head(out[0, j]) for j, head in zip(range(1, d), self.heads)]
        return self.heads[0](out[0, d - 1])


class _BackboneWrapper(nn.Module):
    """Pretrained-encoder UNet++ from segmentation_models_pytorch, if installed."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        try:
            import segmentation_models_pytorch as smp
        except ImportError as exc:  # optional hook
            raise ConfigurationError(
                "encoder_kind='named-backbone' requires segmentation_models_pytorch"
            ) from exc
        self.config = config
        self.net = smp.UnetPlusPlus(
            encoder_name=config.backbone,
            encoder_weights="imagenet" if config.pretrained else None,
            in_channels=config.in_channels,
            classes=config.out_channels,
        )
        self.divisor = 32

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by {self.divisor}")
        return self.net(x)


def build_model(config: ModelConfig, seed: int | None = None) -> nn.Module:
    config.validate()
    if seed is not None:
        torch.manual_seed(seed)
    if config.encoder_kind == "named-backbone":
        return _BackboneWrapper(config)
    return UNetPlusPlus(config)


def foreground_logit(logits: torch.Tensor) -> torch.Tensor:
    """[B, 1 or 2, H, W] head output -> [B, H, W] log-odds of mangrove."""
    if logits.shape[1] == 1:
        return logits[:, 0]
    return logits[:, 1] - logits[:, 0]


def primary_output(output) -> torch.Tensor:
    """Deep-supervision models return a list; the deepest column is the prediction."""
    return output[-1] if isinstance(output, (list, tuple)) else output


def _window_starts(length: int, tile: int, step: int) -> list[int]:
    if length <= tile:
        return [0]
    starts = list(range(0, length - tile + 1, step))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


@torch.no_grad()
def predict_logits(
    model: Callable[[torch.Tensor], torch.Tensor],
    image: np.ndarray,
    tile: int = 256,
    overlap: int = 0,
    batch_size: int = 4,
) -> np.ndarray:
    """Sliding-window foreground logits for a (C, H, W) array, averaged where windows overlap.

    Images smaller than ``tile`` are zero-padded up to one window.
    """
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must lie in [0, {tile}), got {overlap}")
    c, h, w = image.shape
    ph, pw = max(h, tile), max(w, tile)
    if (ph, pw) != (h, w):
        padded = np.zeros((c, ph, pw), dtype=np.float32)
        padded[:, :h, :w] = image
        image = padded
    step = tile - overlap
    acc = np.zeros((ph, pw), dtype=np.float64)
    count = np.zeros((ph, pw), dtype=np.float64)
    windows = [(r, q) for r in _window_starts(ph, tile, step) for q in _window_starts(pw, tile, step)]
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        for k in range(0, len(windows), batch_size):
            chunk = windows[k : k + batch_size]
            batch = torch.from_numpy(np.stack([image[:, r : r + tile, q : q + tile] for r, q in chunk]))
            logits = foreground_logit(primary_output(model(batch))).double().numpy()
            for (r, q), lg in zip(chunk, logits):
                acc[r : r + tile, q : q + tile] += lg
                count[r : r + tile, q : q + tile] += 1
    finally:
        if was_training:
            model.train()
    return (acc / count)[:h, :w]


def predict_mask(
    model: nn.Module,
    scene: MultispectralScene,
    tile: int = 256,
    overlap: int = 0,
    scale: float = REFLECTANCE_SCALE,
    band_names: Sequence[str] | None = None,
) -> RasterGrid:
    """Binary mangrove mask (uint8) on the scene grid; probability > 0.5 is mangrove.

    Pixels with missing data in any band are background.
    """
    cfg = getattr(model, "config", None)
    band_names = band_names or (cfg.band_names if cfg else None)
    if band_names:
        missing = [b for b in band_names if b not in scene.band_names]
        if missing:
            raise SchemaError(f"scene lacks model bands {missing}")
        scene = scene.select(band_names)
    if cfg is not None and len(scene.bands) != cfg.in_channels:
        raise SchemaError(f"scene has {len(scene.bands)} bands, model expects {cfg.in_channels}")
    image, valid = scene_to_array(scene, scale)
    mask = np.zeros(scene.shape, dtype=np.uint8)
    if valid.any():
        logits = predict_logits(model, image, tile, overlap)
        mask = ((logits > 0) & valid).astype(np.uint8)
    return RasterGrid(mask, scene.transform, None)


# ------------------------------------------------------------------ checkpoints


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    state_dict: dict
    model_config: ModelConfig
    epoch: int
    best_miou: float
    train_config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format_version": CHECKPOINT_VERSION,
                "state_dict": self.state_dict,
                "model_config": asdict(self.model_config),
                "epoch": self.epoch,
                "best_miou": self.best_miou,
                "train_config": self.train_config,
                "provenance": self.provenance,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"missing checkpoint: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format_version") != CHECKPOINT_VERSION:
            raise SchemaError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
        return cls(
            state_dict=blob["state_dict"],
            model_config=ModelConfig(**blob["model_config"]),
            epoch=blob["epoch"],
            best_miou=blob["best_miou"],
            train_config=blob.get("train_config", {}),
            provenance=blob.get("provenance", {}),
        )

    def build(self) -> nn.Module:
        model = build_model(self.model_config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model
