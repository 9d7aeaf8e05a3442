"""Generated scenes and workspaces with known ground truth, for tests and demos."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from mangrovewatch.model import DEFAULT_BANDS
from mangrovewatch.raster import (
    GeoTransform,
    ManifestEntry,
    MultispectralScene,
    RasterGrid,
    write_manifest,
    write_raster,
    write_scene,
)

UTM_40N = "EPSG:32640"

# Per-band (background DN, extra DN inside mangrove). Vegetation: red-edge/NIR up, visible down.
_SIGNATURE = {
    "B2": (900, -250), "B3": (1100, -200), "B4": (1200, -500), "B5": (1500, 300),
    "B6": (1800, 900), "B7": (1900, 1200), "B8": (2000, 1500), "B8A": (2050, 1400),
    "B9": (700, 300), "B11": (2200, -600), "B12": (1700, -700),
}


def smooth_field(shape: tuple[int, int], rng: np.random.Generator, sigma: float = 12.0) -> np.ndarray:
    """Spatially correlated field rescaled to [0, 1]."""
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.min()) / (f.max() - f.min())


@dataclass
class SyntheticScene:
    scene: MultispectralScene
    label: RasterGrid
    field: np.ndarray


def make_scene(
    shape: tuple[int, int] = (512, 512),
    seed: int = 0,
    threshold: float = 0.6,
    noise_dn: float = 60.0,
    band_names: Sequence[str] = DEFAULT_BANDS,
    field: np.ndarray | None = None,
    origin: tuple[float, float] = (200_000.0, 2_700_000.0),
    scene_id: str = "synthetic",
    timestamp: tuple[int, int] | None = (2020, 1),
) -> SyntheticScene:
    """Scene whose label is ``field > threshold`` and whose NIR band (B8) is a noisy
    monotone function of that field, so the label is a threshold of B8 up to noise.
    """
    rng = np.random.default_rng(seed)
    if field is None:
        field = smooth_field(shape, rng)
    label = (field > threshold).astype(np.uint8)
    transform = GeoTransform(origin[0], origin[1], 10.0, -10.0, UTM_40N)
    bands = []
    for name in band_names:
        base, delta = _SIGNATURE.get(name, (1000, 500))
        values = base + delta * label.astype(np.float64) + 0.3 * delta * field + rng.normal(0, noise_dn, shape)
        bands.append(np.clip(values, 1, 10_000).astype(np.float32))
    scene = MultispectralScene.from_array(
        np.stack(bands), transform, list(band_names), scene_id=scene_id, timestamp=timestamp
    )
    return SyntheticScene(scene, RasterGrid(label, transform, None), field)


def add_water(scene: MultispectralScene, water: np.ndarray) -> MultispectralScene:
    """Flood ``water`` pixels: green above NIR, so NDWI > 0 there."""
    out = []
    for name, band in zip(scene.band_names, scene.bands):
        v = band.values.copy()
        v[water] = 700.0 if name == "B3" else 250.0
        out.append(RasterGrid(v, band.transform, band.nodata))
    return MultispectralScene(out, scene.band_names, scene.timestamp, scene.qa, scene.scene_id, dict(scene.metadata))


def _as_uint16(scene: MultispectralScene) -> MultispectralScene:
    """L2A-style storage: unsigned DN with 0 as nodata."""
    bands = [RasterGrid(np.rint(b.values).clip(1, 65535).astype(np.uint16), b.transform, 0) for b in scene.bands]
    return MultispectralScene(bands, scene.band_names, scene.timestamp, scene.qa, scene.scene_id, dict(scene.metadata))


def clear_qa(shape: tuple[int, int], transform: GeoTransform, cloudy: np.ndarray | None = None) -> RasterGrid:
    """SCL-style QA: 4 (vegetation) everywhere, 9 (high-probability cloud) where ``cloudy``."""
    qa = np.full(shape, 4, dtype=np.uint8)
    if cloudy is not None:
        qa[cloudy] = 9
    return RasterGrid(qa, transform, None)


def build_demo_workspace(
    root: str | Path,
    years: Sequence[int] = tuple(range(2017, 2025)),
    shape: tuple[int, int] = (512, 512),
    seed: int = 0,
    low_tide_months: tuple[int, int] = (3, 4),
    months: Sequence[int] = tuple(range(1, 13)),
    label_year: int | None = None,
) -> dict[str, Path]:
    """Write a self-consistent input set: manifest + monthly scenes, labels, regions, truth.

    Mangrove extent grows each year by lowering the field threshold. Every
    month carries a tidal water body whose size is smallest in
    ``low_tide_months``. Four regions split the grid into quadrants, one
    of which holds no mangrove by construction.
    """
    root = Path(root)
    data = root / "data"
    scenes_dir = data / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    field = smooth_field(shape, rng)
    h, w = shape
    # north-east quadrant: no mangrove at any date
    field[: h // 2, w // 2 :] *= 0.3

    rows = np.arange(h)[:, None] * np.ones((1, w))
    entries: list[ManifestEntry] = []
    thresholds = {}
    for k, year in enumerate(years):
        thresholds[year] = 0.66 - 0.012 * k
        for month in months:
            tide = 0.15 if month in low_tide_months else 0.25 + 0.02 * ((month * 7) % 5)
            water = rows > h * (1 - tide)
            syn = make_scene(
                shape, seed=seed * 1000 + year * 13 + month, threshold=thresholds[year], field=field,
                scene_id=f"S2_{year}{month:02d}", timestamp=(year, month),
            )
            scene = _as_uint16(add_water(syn.scene, water & (syn.label.values == 0)))
            cloudy = None
            if month == low_tide_months[0]:
                cloudy = np.zeros(shape, dtype=bool)
                cloudy[10:40, 10:40] = True
            qa = clear_qa(shape, scene.transform, cloudy)
            img_path = write_scene(scenes_dir / f"{scene.scene_id}.tif", scene)
            qa_path = write_raster(scenes_dir / f"{scene.scene_id}_qa.tif", qa, ["QA"])
            cover = 3.0 + (month % 4) if month != 6 else 40.0
            entries.append(ManifestEntry(scene.scene_id, img_path, (year, month), list(scene.band_names), cover, qa_path))
    manifest = write_manifest(data / "manifest.json", entries)

    transform = entries[0].load().transform
    if label_year is None:
        label_year = 2020 if 2020 in thresholds else years[0]
    label = (field > thresholds[label_year]).astype(np.uint8)
    labels = write_raster(data / "labels.tif", RasterGrid(label, transform, None), ["label"])
    truth_year = years[-1]
    truth = (field > thresholds[truth_year]).astype(np.uint8)
    truth_path = write_raster(data / f"truth_{truth_year}.tif", RasterGrid(truth, transform, None), ["label"])

    codes = np.zeros(shape, dtype=np.uint8)
    codes[: h // 2, : w // 2] = 1
    codes[: h // 2, w // 2 :] = 2
    codes[h // 2 :, : w // 2] = 3
    codes[h // 2 :, w // 2 :] = 4
    regions = write_raster(data / "regions.tif", RasterGrid(codes, transform, None), ["region"])
    (data / "regions.json").write_text(json.dumps({"1": "northwest", "2": "northeast", "3": "southwest", "4": "southeast"}))
    return {"manifest": manifest, "labels": labels, "regions": regions, "truth": truth_path}
