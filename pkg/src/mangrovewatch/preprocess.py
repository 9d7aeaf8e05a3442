"""Scene selection and tide-minimising annual composites.

Per year: drop scenes at or above the cloud-cover limit, mask cloudy pixels
from the QA layer, measure NDWI open-water area month by month, keep the two
driest months as the low-tide window, then median-mosaic that window's
scenes and clip to the study area.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from mangrovewatch.errors import ConfigurationError, DataAvailabilityError
from mangrovewatch.raster import (
    DEFAULT_NODATA,
    GeoTransform,
    ManifestEntry,
    MultispectralScene,
    RasterGrid,
    RegionMask,
    check_aligned,
    clip_to_region,
    mosaic,
    pixel_area_hectares,
    resample_to,
)

LOGGER = logging.getLogger(__name__)

# Sentinel-2 L2A scene classification: cloud shadow, cloud medium/high probability, thin cirrus.
SCL_CLOUD_CODES = frozenset({3, 8, 9, 10})
# QA60 bitmask: opaque clouds (bit 10) and cirrus (bit 11).
QA60_CLOUD_BITS = (10, 11)


@dataclass(frozen=True, order=True)
class MonthlyWaterArea:
    year: int
    month: int
    water_hectares: float

    def __post_init__(self):
        if self.water_hectares < 0:
            raise ValueError("water area cannot be negative")


@dataclass(frozen=True)
class TideWindow:
    months: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self):
        if len(self.months) != 2 or self.months[0] == self.months[1]:
            raise ValueError(f"a tide window holds two distinct months, got {self.months}")

    def __contains__(self, year_month) -> bool:
        return tuple(year_month) in self.months


def filter_scenes(entries: Sequence[ManifestEntry], max_cloud_pct: float = 10.0) -> list[ManifestEntry]:
    """Keep entries whose cloud cover is strictly below ``max_cloud_pct`` percent."""
    if max_cloud_pct >= 100:
        return list(entries)
    return [e for e in entries if e.cloud_cover < max_cloud_pct]


def cloud_mask(
    scene: MultispectralScene,
    cloud_codes: Iterable[int] = SCL_CLOUD_CODES,
    cloud_bits: Iterable[int] = (),
) -> MultispectralScene:
    """Set pixels flagged cloudy in the QA layer to nodata in every band.

    ``cloud_codes`` matches classification-style QA (value equality),
    ``cloud_bits`` matches bitmask QA; a pixel is cloudy if either rule fires.
    """
    if scene.qa is None:
        raise ConfigurationError(f"scene {scene.scene_id!r} has no QA band to mask clouds with")
    qa = scene.qa.values
    codes = list(cloud_codes)
    cloudy = np.isin(qa, codes) if codes else np.zeros(qa.shape, dtype=bool)
    bits = list(cloud_bits)
    if bits:
        bitmask = sum(1 << b for b in bits)
        cloudy |= (qa.astype(np.int64) & bitmask) != 0
    if not cloudy.any():
        return scene
    bands = []
    for band in scene.bands:
        nodata = DEFAULT_NODATA if band.nodata is None else band.nodata
        values = band.values.astype(np.result_type(band.values.dtype, np.float32), copy=True)
        values[cloudy] = nodata
        bands.append(RasterGrid(values, band.transform, nodata))
    return replace(scene, bands=bands)


def ndwi(green: RasterGrid, nir: RasterGrid) -> RasterGrid:
    """(green - nir) / (green + nir); nodata where either input is missing or the sum is zero."""
    check_aligned(green, nir, what="ndwi inputs")
    g = green.values.astype(np.float64)
    n = nir.values.astype(np.float64)
    denom = g + n
    ok = green.valid_mask() & nir.valid_mask() & (denom != 0)
    out = np.full(g.shape, DEFAULT_NODATA)
    out[ok] = (g[ok] - n[ok]) / denom[ok]
    return RasterGrid(out, green.transform, DEFAULT_NODATA)


def water_area(ndwi_grid: RasterGrid, threshold: float = 0.0, pixel_ha: float | None = None) -> float:
    """Hectares of valid pixels with NDWI strictly above ``threshold``."""
    if pixel_ha is None:
        pixel_ha = pixel_area_hectares(ndwi_grid.transform)
    if pixel_ha <= 0:
        raise ValueError("pixel area must be positive")
    wet = ndwi_grid.valid_mask() & (ndwi_grid.values > threshold)
    return int(wet.sum()) * pixel_ha


def select_tide_window(series: Sequence[MonthlyWaterArea]) -> TideWindow:
    """The two months with least water; ties go to the earlier month."""
    if len(series) < 2:
        raise ValueError(f"need at least two months to choose a window, got {len(series)}")
    ranked = sorted(series, key=lambda m: (m.water_hectares, m.year, m.month))
    picked = sorted((m.year, m.month) for m in ranked[:2])
    return TideWindow((picked[0], picked[1]))


def _to_grid(scene: MultispectralScene, transform: GeoTransform, shape: tuple[int, int]) -> MultispectralScene:
    if scene.transform == transform and scene.shape == shape:
        return scene
    bands = [resample_to(b, transform, "nearest", shape=shape) for b in scene.bands]
    return replace(scene, bands=bands, qa=None)


@dataclass
class PreprocessParams:
    max_cloud_pct: float = 10.0
    ndwi_threshold: float = 0.0
    cloud_codes: tuple[int, ...] = tuple(sorted(SCL_CLOUD_CODES))
    cloud_bits: tuple[int, ...] = ()
    green_band: str = "B3"
    nir_band: str = "B8"
    reducer: str = "median"


def monthly_water_areas(
    scenes: Sequence[MultispectralScene],
    region: RegionMask,
    params: PreprocessParams | None = None,
) -> list[MonthlyWaterArea]:
    """Water area per (year, month), measured on the cloud-masked monthly median inside ``region``."""
    params = params or PreprocessParams()
    by_month: dict[tuple[int, int], list[MultispectralScene]] = defaultdict(list)
    for s in scenes:
        by_month[s.timestamp].append(s)
    grid_t, grid_shape = region.mask.transform, region.mask.shape
    pixel_ha = pixel_area_hectares(grid_t)
    out = []
    for (year, month), group in sorted(by_month.items()):
        comp = mosaic([cloud_mask(s, params.cloud_codes, params.cloud_bits) for s in group], params.reducer)
        comp = clip_to_region(_to_grid(comp, grid_t, grid_shape), region)
        idx = ndwi(comp.band(params.green_band), comp.band(params.nir_band))
        out.append(MonthlyWaterArea(year, month, water_area(idx, params.ndwi_threshold, pixel_ha)))
    return out


def build_window_composite(
    manifest: Sequence[ManifestEntry],
    window: TideWindow,
    region: RegionMask,
    params: PreprocessParams | None = None,
    scenes: dict[str, MultispectralScene] | None = None,
) -> MultispectralScene:
    """Median mosaic of the cloud-masked scenes acquired in ``window``, clipped to ``region``.

    ``scenes`` optionally maps scene ids to already-loaded scenes.
    """
    params = params or PreprocessParams()
    chosen = [e for e in filter_scenes(manifest, params.max_cloud_pct) if e.timestamp in window]
    if not chosen:
        months = ", ".join(f"{y:04d}-{m:02d}" for y, m in window.months)
        raise DataAvailabilityError(f"no scene below the cloud limit in window {months}")
    scenes = scenes or {}
    loaded = [scenes[e.scene_id] if e.scene_id in scenes else e.load() for e in chosen]
    masked = [cloud_mask(s, params.cloud_codes, params.cloud_bits) for s in loaded]
    comp = mosaic(masked, params.reducer)
    comp = _to_grid(comp, region.mask.transform, region.mask.shape)
    comp = clip_to_region(comp, region)
    comp.timestamp = window.months[0]
    comp.scene_id = f"composite_{window.months[0][0]}"
    comp.metadata = {**comp.metadata, "window": [list(m) for m in window.months]}
    return comp


@dataclass
class YearResult:
    year: int
    composite: MultispectralScene
    window: TideWindow
    water_areas: list[MonthlyWaterArea]
    scene_counts: dict[str, int] = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "year": self.year,
            "window_months": [f"{y:04d}-{m:02d}" for y, m in self.window.months],
            "water_areas_ha": [
                {"month": f"{w.year:04d}-{w.month:02d}", "water_ha": round(w.water_hectares, 6)}
                for w in self.water_areas
            ],
            "scene_counts": self.scene_counts,
        }


def preprocess_year(
    manifest: Sequence[ManifestEntry],
    year: int,
    region: RegionMask,
    params: PreprocessParams | None = None,
) -> YearResult:
    params = params or PreprocessParams()
    in_year = [e for e in manifest if e.timestamp[0] == year]
    if not in_year:
        raise DataAvailabilityError(f"manifest has no scenes for year {year}")
    usable = filter_scenes(in_year, params.max_cloud_pct)
    if not usable:
        raise DataAvailabilityError(
            f"year {year}: all {len(in_year)} scenes are at or above {params.max_cloud_pct}% cloud"
        )
    loaded = {e.scene_id: e.load() for e in usable}
    areas = monthly_water_areas(list(loaded.values()), region, params)
    window = select_tide_window(areas)
    LOGGER.info("year %d: tide window %s", year, window.months)
    comp = build_window_composite(usable, window, region, params, scenes=loaded)
    counts = {
        "in_year": len(in_year),
        "below_cloud_limit": len(usable),
        "in_window": sum(e.timestamp in window for e in usable),
    }
    return YearResult(year, comp, window, areas, counts)
