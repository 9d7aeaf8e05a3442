"""
Multi-year mangrove area accounting.

Area series per region, year-on-year change tables, growth summaries,
blue-carbon estimates and per-pixel gain/loss maps between two dates.
Everything is computed at full precision; rounding happens only when a
table is rendered.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from mangrovewatch.errors import AlignmentError
from mangrovewatch.raster import RasterGrid, RegionMask, check_aligned, write_raster

CARBON_DENSITY_T_PER_HA = 94.3
CO2_PER_C = 44.0 / 12.0

# change-map class codes
STABLE_ABSENT, LOSS, GAIN, STABLE_PRESENT = 0, 1, 2, 3
CHANGE_NODATA = 255
CHANGE_CLASSES = {STABLE_ABSENT: "stable-absent", LOSS: "loss", GAIN: "gain", STABLE_PRESENT: "stable-present"}
# earlier-only extent draws blue, later-only red, both purple
CHANGE_COLORS = {
    STABLE_ABSENT: (255, 255, 255, 0),
    LOSS: (31, 119, 255, 255),
    GAIN: (230, 30, 30, 255),
    STABLE_PRESENT: (140, 60, 170, 255),
}

TABLE_HEADER = ["Years", "Area (ha)", "Annual change (ha)", "Annual change rate (%)"]


@dataclass
class AreaSeries:
    entries: list[tuple[int, float]]
    region: str = "total"

    def __post_init__(self):
        self.entries = [(int(y), float(a)) for y, a in self.entries]
        years = [y for y, _ in self.entries]
        if any(b <= a for a, b in zip(years, years[1:])):
            raise ValueError(f"years must be strictly increasing: {years}")
        if any(a < 0 for _, a in self.entries):
            raise ValueError("areas must be non-negative")

    @property
    def years(self) -> list[int]:
        return [y for y, _ in self.entries]

    @property
    def areas(self) -> list[float]:
        return [a for _, a in self.entries]


@dataclass
class ChangeRecord:
    year: int
    area_ha: float
    annual_change_ha: float | None = None
    annual_change_pct: float | None = None


@dataclass
class GrowthSummary:
    delta_ha: float
    pct: float


@dataclass
class CarbonEstimate:
    area_delta_ha: float
    carbon_density_t_per_ha: float
    carbon_t: float
    co2_t: float
    co2_factor: float = CO2_PER_C


@dataclass
class ChangeMap:
    classes: np.ndarray  # uint8 codes, CHANGE_NODATA outside the valid set
    transform: object = None

    def count(self, code: int) -> int:
        return int(np.count_nonzero(self.classes == code))

    def counts(self) -> dict[str, int]:
        return {name: self.count(code) for code, name in CHANGE_CLASSES.items()}

    def to_grid(self) -> RasterGrid:
        return RasterGrid(self.classes, self.transform, CHANGE_NODATA)


def _mask_values(mask) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(mask, RasterGrid):
        valid = mask.valid_mask()
        return (np.where(valid, mask.values, 0) > 0), valid
    arr = np.asarray(mask)
    return arr > 0, np.ones(arr.shape, dtype=bool)


def positive_pixels(mask) -> int:
    values, valid = _mask_values(mask)
    return int(np.count_nonzero(values & valid))


def area_hectares(mask, pixel_ha: float) -> float:
    if pixel_ha <= 0:
        raise ValueError("pixel area must be positive")
    return positive_pixels(mask) * pixel_ha


def annual_changes(series: AreaSeries) -> list[ChangeRecord]:
    if len(series.entries) < 2:
        raise ValueError("annual changes need at least two years")
    out = [ChangeRecord(*series.entries[0])]
    for (_, prev), (year, area) in zip(series.entries, series.entries[1:]):
        delta = area - prev
        out.append(ChangeRecord(year, area, delta, 100.0 * delta / prev if prev else math.nan))
    return out


def total_growth(series: AreaSeries) -> GrowthSummary:
    if len(series.entries) < 2:
        raise ValueError("growth needs at least two years")
    first, last = series.areas[0], series.areas[-1]
    delta = last - first
    return GrowthSummary(delta, 100.0 * delta / first if first else math.nan)


def mean_annual_growth_rate(series: AreaSeries, method: str = "geometric") -> float:
    """Average yearly growth in percent.

    ``geometric`` is the compound rate over the whole span; ``arithmetic``
    averages the individual year-on-year rates.
    """
    if len(series.entries) < 2:
        raise ValueError("growth rate needs at least two years")
    if method not in ("geometric", "arithmetic"):
        raise ValueError(f"unknown method {method!r}")
    first, last = series.areas[0], series.areas[-1]
    if first == 0:
        return math.nan
    if method == "geometric":
        steps = len(series.entries) - 1
        return 100.0 * ((last / first) ** (1.0 / steps) - 1.0)
    rates = [r.annual_change_pct for r in annual_changes(series)[1:]]
    return float(np.mean(rates))


def carbon_estimate(
    delta_ha: float, density: float = CARBON_DENSITY_T_PER_HA, co2_factor: float = CO2_PER_C
) -> CarbonEstimate:
    if density <= 0:
        raise ValueError("carbon density must be positive")
    carbon = delta_ha * density
    return CarbonEstimate(delta_ha, density, carbon, carbon * co2_factor, co2_factor)


def change_map(earlier, later) -> ChangeMap:
    if isinstance(earlier, RasterGrid) and isinstance(later, RasterGrid):
        check_aligned(earlier, later, what="change masks")
    e, ve = _mask_values(earlier)
    l, vl = _mask_values(later)
    if e.shape != l.shape:
        raise AlignmentError(f"earlier {e.shape} and later {l.shape} masks differ in shape")
    classes = np.full(e.shape, CHANGE_NODATA, dtype=np.uint8)
    valid = ve & vl
    classes[valid & ~e & ~l] = STABLE_ABSENT
    classes[valid & e & ~l] = LOSS
    classes[valid & ~e & l] = GAIN
    classes[valid & e & l] = STABLE_PRESENT
    transform = earlier.transform if isinstance(earlier, RasterGrid) else None
    return ChangeMap(classes, transform)


def per_region_series(
    masks_by_year: Mapping[int, RasterGrid | np.ndarray],
    regions: Sequence[RegionMask],
    pixel_ha: float,
) -> dict[str, AreaSeries]:
    """Area of (mask AND region) for every region and year, from integer pixel counts."""
    years = sorted(masks_by_year)
    out = {}
    for region in regions:
        entries = []
        for year in years:
            mask = masks_by_year[year]
            if isinstance(mask, RasterGrid):
                check_aligned(mask, region.mask, what=f"{year} mask vs region {region.name}")
            values, valid = _mask_values(mask)
            if values.shape != region.mask.shape:
                raise AlignmentError(f"{year} mask {values.shape} vs region {region.name} {region.mask.shape}")
            entries.append((year, int(np.count_nonzero(values & valid & region.inside)) * pixel_ha))
        out[region.name] = AreaSeries(entries, region.name)
    return out


def global_series(masks_by_year: Mapping[int, RasterGrid | np.ndarray], pixel_ha: float) -> AreaSeries:
    return AreaSeries([(y, area_hectares(masks_by_year[y], pixel_ha)) for y in sorted(masks_by_year)])


# ----------------------------------------------------------------------- reports


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    if math.isnan(value):
        return "NaN"
    return f"{value:.2f}"


def table_rows(series: AreaSeries) -> list[list[str]]:
    return [
        [str(r.year), _fmt(r.area_ha), _fmt(r.annual_change_ha), _fmt(r.annual_change_pct)]
        for r in annual_changes(series)
    ]


def write_change_table(path: str | Path, series: AreaSeries) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        w.writerows(table_rows(series))
    return path


def _num(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return value


@dataclass
class ChangeReport:
    total: AreaSeries
    regions: dict[str, AreaSeries] = field(default_factory=dict)
    carbon_density: float = CARBON_DENSITY_T_PER_HA
    co2_factor: float = CO2_PER_C
    growth_method: str = "geometric"
    reference_co2_t: float | None = None

    def to_dict(self) -> dict:
        growth = total_growth(self.total)
        carbon = carbon_estimate(growth.delta_ha, self.carbon_density, self.co2_factor)
        carbon_doc = asdict(carbon)
        if self.reference_co2_t:
            carbon_doc["reference_co2_t"] = self.reference_co2_t
            carbon_doc["co2_deviation_pct"] = 100.0 * (carbon.co2_t - self.reference_co2_t) / self.reference_co2_t
            carbon_doc["implied_co2_factor"] = self.reference_co2_t / carbon.carbon_t if carbon.carbon_t else None
        return {
            "total": {
                "series": [{"year": y, "area_ha": a} for y, a in self.total.entries],
                "annual_changes": [{k: _num(v) for k, v in asdict(r).items()} for r in annual_changes(self.total)],
                "total_growth": {k: _num(v) for k, v in asdict(growth).items()},
                "mean_annual_growth_pct": {
                    "geometric": _num(mean_annual_growth_rate(self.total, "geometric")),
                    "arithmetic": _num(mean_annual_growth_rate(self.total, "arithmetic")),
                    "default": self.growth_method,
                },
            },
            "carbon": carbon_doc,
            "regions": {
                name: {
                    "series": [{"year": y, "area_ha": a} for y, a in s.entries],
                    "total_growth": {k: _num(v) for k, v in asdict(total_growth(s)).items()},
                }
                for name, s in self.regions.items()
            },
        }

    def write(self, directory: str | Path, provenance: dict | None = None) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"table": write_change_table(directory / "area_change_table.csv", self.total)}
        for name, s in self.regions.items():
            paths[f"table_{name}"] = write_change_table(directory / f"area_change_table_{name}.csv", s)
        doc = {"provenance": provenance or {}, **self.to_dict()}
        paths["json"] = directory / "change_report.json"
        paths["json"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        paths["trend_plot"] = plot_area_trend(directory / "area_trend.png", self.total)
        if self.regions:
            paths["region_plot"] = plot_region_series(directory / "region_trend.png", self.regions)
        return paths


def plot_area_trend(path: str | Path, series: AreaSeries) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(series.years, series.areas, color="seagreen")
    ax.plot(series.years, series.areas, color="black", marker="o")
    ax.set_xlabel("year")
    ax.set_ylabel("mangrove area (ha)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_region_series(path: str | Path, regions: Mapping[str, AreaSeries]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(regions)
    cols = min(3, n)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows), squeeze=False)
    for ax, (name, s) in zip(axes.flat, regions.items()):
        ax.plot(s.years, s.areas, marker="o")
        ax.set_title(name)
        ax.set_ylabel("ha")
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_change_map(path: str | Path, cmap: ChangeMap) -> Path:
    """Categorical GeoTIFF with an embedded colour table."""
    if cmap.transform is None:
        raise ValueError("change map has no georeference; build it from RasterGrid masks")
    colors = {code: rgba for code, rgba in CHANGE_COLORS.items()}
    colors[CHANGE_NODATA] = (0, 0, 0, 0)
    return write_raster(
        path,
        cmap.to_grid(),
        ["change_class"],
        colormap=colors,
        tags={f"class_{code}": name for code, name in CHANGE_CLASSES.items()},
    )
