"""
Georeferenced raster containers and grid operations.

Everything downstream (compositing, tiling, inference, change accounting)
works on the three containers defined here:

    RasterGrid          one 2-D layer plus its affine grid and nodata value
    MultispectralScene  an ordered stack of named RasterGrid bands sharing one
                        grid, with an optional QA layer and acquisition month
    RegionMask          a named {0,1} membership raster

All operations return new objects; inputs are never mutated.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import rasterio
from affine import Affine
from rasterio.crs import CRS
from rasterio.errors import CRSError

from mangrovewatch.errors import (
    AlignmentError,
    DependencyError,
    SchemaError,
    UnsupportedCRSError,
)

# Outside the physical range of L2A reflectance digital numbers and of NDWI.
DEFAULT_NODATA = -9999.0

REDUCERS = ("median", "mean", "first")
RESAMPLING = ("nearest", "bilinear")

_GRID_ATOL = 1e-6


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine grid: map = origin + (col * pixel_width, row * pixel_height)."""

    origin_x: float
    origin_y: float
    pixel_width: float
    pixel_height: float
    crs_id: str = "EPSG:32640"

    def __post_init__(self):
        if not self.pixel_width > 0:
            raise ValueError(f"pixel_width must be positive, got {self.pixel_width}")
        if self.pixel_height == 0 or not math.isfinite(self.pixel_height):
            raise ValueError(f"pixel_height must be non-zero, got {self.pixel_height}")

    @property
    def affine(self) -> Affine:
        return Affine(self.pixel_width, 0.0, self.origin_x, 0.0, self.pixel_height, self.origin_y)

    @classmethod
    def from_affine(cls, affine: Affine, crs_id: str) -> GeoTransform:
        if affine.b != 0 or affine.d != 0:
            raise AlignmentError("rotated grids are not supported")
        return cls(affine.c, affine.f, affine.a, affine.e, crs_id)

    def pixel_to_map(self, row: float, col: float) -> tuple[float, float]:
        return self.origin_x + col * self.pixel_width, self.origin_y + row * self.pixel_height

    def map_to_pixel(self, x: float, y: float) -> tuple[float, float]:
        return (y - self.origin_y) / self.pixel_height, (x - self.origin_x) / self.pixel_width

    def bounds(self, shape: tuple[int, int]) -> tuple[float, float, float, float]:
        """(left, bottom, right, top) for a grid of the given (height, width)."""
        height, width = shape
        x0, y0 = self.origin_x, self.origin_y
        x1, y1 = self.pixel_to_map(height, width)
        return min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)


@dataclass
class RasterGrid:
    values: np.ndarray
    transform: GeoTransform
    nodata: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise SchemaError(f"raster values must be 2-D, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def valid_mask(self) -> np.ndarray:
        """True where the pixel holds an observation."""
        valid = np.ones(self.shape, dtype=bool)
        if np.issubdtype(self.values.dtype, np.floating):
            valid &= ~np.isnan(self.values)
        if self.nodata is not None:
            if math.isnan(self.nodata):
                return valid
            valid &= self.values != self.nodata
        return valid

    def with_values(self, values: np.ndarray, nodata: float | None = ...) -> RasterGrid:
        return RasterGrid(values, self.transform, self.nodata if nodata is ... else nodata)


@dataclass
class MultispectralScene:
    """A co-registered band stack for one acquisition (or one composite)."""

    bands: list[RasterGrid]
    band_names: list[str]
    timestamp: tuple[int, int] | None = None
    qa: RasterGrid | None = None
    scene_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.band_names = list(self.band_names)
        if not self.bands:
            raise SchemaError("a scene needs at least one band")
        if len(set(self.band_names)) != len(self.band_names):
            raise SchemaError(f"duplicate band names: {self.band_names}")
        if len(self.band_names) != len(self.bands):
            raise SchemaError(
                f"{len(self.band_names)} band names for {len(self.bands)} band layers"
            )
        ref = self.bands[0]
        for name, band in zip(self.band_names[1:], self.bands[1:]):
            check_aligned(ref, band, what=f"band {name}")
        if self.qa is not None:
            check_aligned(ref, self.qa, what="qa band")

    @classmethod
    def from_array(
        cls,
        array: np.ndarray,
        transform: GeoTransform,
        band_names: Sequence[str],
        nodata: float | None = DEFAULT_NODATA,
        **kwargs,
    ) -> MultispectralScene:
        array = np.asarray(array)
        if array.ndim != 3:
            raise SchemaError(f"expected (bands, rows, cols), got {array.shape}")
        bands = [RasterGrid(array[i], transform, nodata) for i in range(array.shape[0])]
        return cls(bands, list(band_names), **kwargs)

    @property
    def transform(self) -> GeoTransform:
        return self.bands[0].transform

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands[0].shape

    def band(self, name: str) -> RasterGrid:
        try:
            return self.bands[self.band_names.index(name)]
        except ValueError:
            raise SchemaError(f"scene has no band {name!r}; bands are {self.band_names}") from None

    def stack(self) -> np.ndarray:
        return np.stack([b.values for b in self.bands])

    def invalid_mask(self) -> np.ndarray:
        """True where any band lacks data."""
        invalid = np.zeros(self.shape, dtype=bool)
        for band in self.bands:
            invalid |= ~band.valid_mask()
        return invalid

    def select(self, band_names: Sequence[str]) -> MultispectralScene:
        """Reorder/subset bands; the result's channel order is exactly ``band_names``."""
        return replace(self, bands=[self.band(n) for n in band_names], band_names=list(band_names))


@dataclass
class RegionMask:
    name: str
    mask: RasterGrid

    def __post_init__(self):
        vals = np.unique(self.mask.values)
        if not np.isin(vals, (0, 1)).all():
            raise SchemaError(f"region {self.name!r} mask must be 0/1, found {vals[:5]}")

    @property
    def inside(self) -> np.ndarray:
        return self.mask.values.astype(bool)


def check_aligned(a: RasterGrid, b: RasterGrid, what: str = "raster") -> None:
    """Raise AlignmentError naming the first dimension on which two grids differ."""
    ta, tb = a.transform, b.transform
    checks = [
        ("height", a.height, b.height),
        ("width", a.width, b.width),
    ]
    for name, va, vb in checks:
        if va != vb:
            raise AlignmentError(f"{what}: {name} mismatch ({va} != {vb})")
    if ta.crs_id != tb.crs_id:
        raise AlignmentError(f"{what}: crs mismatch ({ta.crs_id} != {tb.crs_id})")
    for name in ("origin_x", "origin_y", "pixel_width", "pixel_height"):
        va, vb = getattr(ta, name), getattr(tb, name)
        if not math.isclose(va, vb, rel_tol=0, abs_tol=_GRID_ATOL * max(1.0, abs(ta.pixel_width))):
            raise AlignmentError(f"{what}: {name} mismatch ({va} != {vb})")


def _nodata_of(grid: RasterGrid) -> float:
    return DEFAULT_NODATA if grid.nodata is None else grid.nodata


def clip_to_region(scene: MultispectralScene, region: RegionMask) -> MultispectralScene:
    """Set every band pixel outside ``region`` to nodata. Grid is unchanged."""
    check_aligned(scene.bands[0], region.mask, what=f"region {region.name}")
    outside = ~region.inside
    bands = []
    for band in scene.bands:
        nodata = _nodata_of(band)
        values = band.values.astype(np.result_type(band.values.dtype, np.float32), copy=True)
        values[outside] = nodata
        bands.append(RasterGrid(values, band.transform, nodata))
    return replace(scene, bands=bands)


def mosaic(scenes: Sequence[MultispectralScene], reducer: str = "median") -> MultispectralScene:
    """Composite scenes onto the union of their extents.

    Each output pixel reduces over the scenes that hold valid data there; pixels
    with no contributor are nodata. Grids must share crs and resolution and sit
    on a common lattice (integer pixel offsets).
    """
    if not scenes:
        raise ValueError("mosaic needs at least one scene")
    if reducer not in REDUCERS:
        raise ValueError(f"unknown reducer {reducer!r}; choose from {REDUCERS}")
    ref = scenes[0]
    t0 = ref.transform
    for s in scenes[1:]:
        if s.band_names != ref.band_names:
            raise SchemaError(f"band names differ: {s.band_names} vs {ref.band_names}")
        if s.transform.crs_id != t0.crs_id:
            raise AlignmentError(f"crs mismatch ({s.transform.crs_id} != {t0.crs_id})")
        if not (
            math.isclose(s.transform.pixel_width, t0.pixel_width)
            and math.isclose(s.transform.pixel_height, t0.pixel_height)
        ):
            raise AlignmentError("mosaic inputs must share a resolution; resample first")

    # Union box in map coordinates, then every scene's offset on the output lattice.
    left = min(s.transform.bounds(s.shape)[0] for s in scenes)
    right = max(s.transform.bounds(s.shape)[2] for s in scenes)
    bottom = min(s.transform.bounds(s.shape)[1] for s in scenes)
    top = max(s.transform.bounds(s.shape)[3] for s in scenes)
    pw, ph = t0.pixel_width, t0.pixel_height
    origin_y = top if ph < 0 else bottom
    out_t = GeoTransform(left, origin_y, pw, ph, t0.crs_id)
    width = int(round((right - left) / pw))
    height = int(round((top - bottom) / abs(ph)))

    n_bands = len(ref.bands)
    stack = np.full((len(scenes), n_bands, height, width), np.nan, dtype=np.float64)
    for k, s in enumerate(scenes):
        r_f, c_f = out_t.map_to_pixel(s.transform.origin_x, s.transform.origin_y)
        r0, c0 = int(round(r_f)), int(round(c_f))
        if abs(r_f - r0) > 1e-6 or abs(c_f - c0) > 1e-6:
            raise AlignmentError(f"scene {s.scene_id or k} is not on the common pixel lattice")
        h, w = s.shape
        for b, band in enumerate(s.bands):
            vals = band.values.astype(np.float64)
            vals = np.where(band.valid_mask(), vals, np.nan)
            stack[k, b, r0 : r0 + h, c0 : c0 + w] = vals

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if reducer == "median":
            out = np.nanmedian(stack, axis=0)
        elif reducer == "mean":
            out = np.nanmean(stack, axis=0)
        else:
            has = ~np.isnan(stack)
            first = np.argmax(has, axis=0)
            out = np.take_along_axis(stack, first[None], axis=0)[0]

    nodata = _nodata_of(ref.bands[0])
    out = np.where(np.isnan(out), nodata, out)
    dtype = np.result_type(ref.bands[0].values.dtype, np.float32)
    bands = [RasterGrid(out[b].astype(dtype), out_t, nodata) for b in range(n_bands)]
    return MultispectralScene(
        bands,
        list(ref.band_names),
        timestamp=ref.timestamp,
        qa=None,
        scene_id=ref.scene_id if len(scenes) == 1 else "mosaic",
        metadata={"reducer": reducer, "sources": [s.scene_id for s in scenes]},
    )


def resample_to(
    grid: RasterGrid,
    target_transform: GeoTransform,
    method: str = "bilinear",
    shape: tuple[int, int] | None = None,
) -> RasterGrid:
    """Sample ``grid`` onto ``target_transform``.

    ``shape`` defaults to whatever covers the source extent at the target
    resolution. Target pixels falling outside the source are nodata. Bilinear
    weights are renormalised over valid neighbours, so outputs stay within the
    source value range and nodata never leaks into the average.
    """
    if method not in RESAMPLING:
        raise ValueError(f"unknown resampling method {method!r}")
    if target_transform.crs_id != grid.transform.crs_id:
        raise AlignmentError("resample_to does not reproject; crs differ")
    if shape is None:
        left, bottom, right, top = grid.transform.bounds(grid.shape)
        shape = (
            int(round((top - bottom) / abs(target_transform.pixel_height))),
            int(round((right - left) / target_transform.pixel_width)),
        )
    if shape[0] <= 0 or shape[1] <= 0:
        raise ValueError(f"degenerate target grid shape {shape}")

    src = grid.transform
    if src == target_transform and shape == grid.shape:
        return RasterGrid(grid.values.copy(), grid.transform, grid.nodata)

    rows = np.arange(shape[0]) + 0.5
    cols = np.arange(shape[1]) + 0.5
    ys = target_transform.origin_y + rows * target_transform.pixel_height
    xs = target_transform.origin_x + cols * target_transform.pixel_width
    # fractional source pixel coordinates of target centres
    src_r = (ys - src.origin_y) / src.pixel_height
    src_c = (xs - src.origin_x) / src.pixel_width
    nodata = _nodata_of(grid)
    valid = grid.valid_mask()
    h, w = grid.shape

    inside_r = (src_r >= 0) & (src_r < h)
    inside_c = (src_c >= 0) & (src_c < w)
    inside = inside_r[:, None] & inside_c[None, :]

    if method == "nearest":
        ri = np.clip(np.floor(src_r).astype(int), 0, h - 1)
        ci = np.clip(np.floor(src_c).astype(int), 0, w - 1)
        out = grid.values[np.ix_(ri, ci)].copy()
        ok = valid[np.ix_(ri, ci)] & inside
        if not ok.all():
            out = out.astype(np.result_type(out.dtype, type(nodata)))
            out[~ok] = nodata
        return RasterGrid(out, target_transform, grid.nodata if ok.all() else nodata)

    # bilinear on pixel centres, clamped at the edges
    fr = np.clip(src_r - 0.5, 0, h - 1)
    fc = np.clip(src_c - 0.5, 0, w - 1)
    r0 = np.floor(fr).astype(int)
    c0 = np.floor(fc).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    dr = (fr - r0)[:, None]
    dc = (fc - c0)[None, :]
    vals = np.where(valid, grid.values.astype(np.float64), 0.0)
    wv = valid.astype(np.float64)
    acc = np.zeros(shape)
    wsum = np.zeros(shape)
    for rr, cc, wt in (
        (r0, c0, (1 - dr) * (1 - dc)),
        (r0, c1, (1 - dr) * dc),
        (r1, c0, dr * (1 - dc)),
        (r1, c1, dr * dc),
    ):
        acc += wt * vals[np.ix_(rr, cc)]
        wsum += wt * wv[np.ix_(rr, cc)]
    ok = inside & (wsum > 1e-12)
    out = np.full(shape, nodata, dtype=np.float64)
    out[ok] = acc[ok] / wsum[ok]
    dtype = np.result_type(grid.values.dtype, np.float32)
    return RasterGrid(out.astype(dtype), target_transform, nodata)


def pixel_area_hectares(transform: GeoTransform) -> float:
    """Area of one pixel in hectares; the grid must be in a metric CRS."""
    try:
        crs = CRS.from_user_input(transform.crs_id)
    except CRSError as exc:
        raise UnsupportedCRSError(f"cannot interpret crs {transform.crs_id!r}") from exc
    if crs.is_geographic:
        raise UnsupportedCRSError(f"{transform.crs_id} is geographic; pixel area needs metres")
    unit, factor = crs.linear_units_factor
    if not math.isclose(factor, 1.0):
        raise UnsupportedCRSError(f"{transform.crs_id} uses {unit}, not metres")
    return abs(transform.pixel_width * transform.pixel_height) / 10_000.0


# --------------------------------------------------------------------------- I/O


def _crs_string(crs: CRS | None) -> str:
    if crs is None:
        return ""
    epsg = crs.to_epsg()
    return f"EPSG:{epsg}" if epsg else crs.to_string()


def read_raster(path: str | Path) -> tuple[list[RasterGrid], list[str]]:
    """Read every band of a GeoTIFF. Returns the grids and their descriptions."""
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing raster file: {path}")
    with rasterio.open(path) as ds:
        transform = GeoTransform.from_affine(ds.transform, _crs_string(ds.crs))
        data = ds.read()
        nodata = ds.nodata
        names = [d or f"band_{i + 1}" for i, d in enumerate(ds.descriptions)]
    return [RasterGrid(data[i], transform, nodata) for i in range(data.shape[0])], names


def read_grid(path: str | Path, band: int = 1) -> RasterGrid:
    grids, _ = read_raster(path)
    return grids[band - 1]


def write_raster(
    path: str | Path,
    grids: RasterGrid | Sequence[RasterGrid],
    band_names: Sequence[str] | None = None,
    colormap: dict[int, tuple[int, int, int, int]] | None = None,
    tags: dict[str, str] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(grids, RasterGrid):
        grids = [grids]
    ref = grids[0]
    data = np.stack([g.values for g in grids])
    profile = dict(
        driver="GTiff",
        height=ref.height,
        width=ref.width,
        count=len(grids),
        dtype=data.dtype.name,
        transform=ref.transform.affine,
        nodata=ref.nodata,
        compress="deflate",
    )
    if ref.transform.crs_id:
        profile["crs"] = CRS.from_user_input(ref.transform.crs_id)
    with rasterio.open(path, "w", **profile) as ds:
        ds.write(data)
        if band_names:
            for i, name in enumerate(band_names, start=1):
                ds.set_band_description(i, name)
        if colormap:
            ds.write_colormap(1, colormap)
        if tags:
            ds.update_tags(**tags)
    return path


def write_scene(path: str | Path, scene: MultispectralScene, tags: dict[str, str] | None = None) -> Path:
    tags = dict(tags or {})
    if scene.timestamp:
        tags.setdefault("timestamp", f"{scene.timestamp[0]:04d}-{scene.timestamp[1]:02d}")
    return write_raster(path, scene.bands, scene.band_names, tags=tags)


def read_scene(
    path: str | Path,
    band_names: Sequence[str] | None = None,
    qa_path: str | Path | None = None,
    timestamp: tuple[int, int] | None = None,
    scene_id: str = "",
) -> MultispectralScene:
    grids, names = read_raster(path)
    if band_names is not None:
        if len(band_names) != len(grids):
            raise SchemaError(f"{path}: {len(grids)} bands on disk, {len(band_names)} names given")
        names = list(band_names)
    qa = read_grid(qa_path) if qa_path else None
    if timestamp is None:
        with rasterio.open(path) as ds:
            stamp = ds.tags().get("timestamp")
        if stamp:
            timestamp = parse_year_month(stamp)
    return MultispectralScene(grids, names, timestamp=timestamp, qa=qa, scene_id=scene_id or Path(path).stem)


def read_region_masks(path: str | Path) -> list[RegionMask]:
    """Regions are stored as one integer-coded raster plus a JSON sidecar {code: name}.

    A single-band 0/1 raster without sidecar is read as one region named after the file.
    """
    path = Path(path)
    grid = read_grid(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        return [RegionMask(path.stem, grid.with_values((grid.values == 1).astype(np.uint8), None))]
    codes = json.loads(sidecar.read_text())
    return [
        RegionMask(name, grid.with_values((grid.values == int(code)).astype(np.uint8), None))
        for code, name in sorted(codes.items(), key=lambda kv: int(kv[0]))
    ]


def union_region(regions: Iterable[RegionMask], name: str = "study_area") -> RegionMask:
    regions = list(regions)
    inside = np.zeros(regions[0].mask.shape, dtype=bool)
    for r in regions:
        check_aligned(regions[0].mask, r.mask, what=f"region {r.name}")
        inside |= r.inside
    return RegionMask(name, regions[0].mask.with_values(inside.astype(np.uint8), None))


# ----------------------------------------------------------------------- manifest


def parse_year_month(text: str) -> tuple[int, int]:
    parts = str(text).split("-")
    if len(parts) < 2:
        raise SchemaError(f"timestamp {text!r} is not YYYY-MM[-DD]")
    year, month = int(parts[0]), int(parts[1])
    if not 1 <= month <= 12:
        raise SchemaError(f"timestamp {text!r} has month outside 1..12")
    return year, month


@dataclass
class ManifestEntry:
    scene_id: str
    path: Path
    timestamp: tuple[int, int]
    band_names: list[str]
    cloud_cover: float
    qa_path: Path | None = None

    def load(self) -> MultispectralScene:
        return read_scene(self.path, self.band_names, self.qa_path, self.timestamp, self.scene_id)


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse a scene manifest.

    Layout::

        {"scenes": [{"id": "S2A_20190312", "path": "scenes/a.tif", "qa_path": "scenes/a_qa.tif",
                     "timestamp": "2019-03-12", "band_names": ["B2", ...], "cloud_cover": 4.2}]}

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing scene manifest: {path}")
    doc = json.loads(path.read_text())
    base = path.parent
    entries = []
    for i, raw in enumerate(doc.get("scenes", [])):
        try:
            cloud = float(raw["cloud_cover"])
            entry = ManifestEntry(
                scene_id=str(raw.get("id", f"scene_{i}")),
                path=base / raw["path"],
                timestamp=parse_year_month(raw["timestamp"]),
                band_names=list(raw["band_names"]),
                cloud_cover=cloud,
                qa_path=base / raw["qa_path"] if raw.get("qa_path") else None,
            )
        except KeyError as exc:
            raise SchemaError(f"manifest entry {i} lacks field {exc}") from None
        if not 0 <= cloud <= 100:
            raise SchemaError(f"manifest entry {i}: cloud_cover {cloud} outside [0, 100]")
        entries.append(entry)
    return entries


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> Path:
    path = Path(path)
    base = path.parent

    def rel(p: Path) -> str:
        try:
            return str(Path(p).relative_to(base))
        except ValueError:
            return str(p)

    doc = {
        "scenes": [
            {
                "id": e.scene_id,
                "path": rel(e.path),
                **({"qa_path": rel(e.qa_path)} if e.qa_path else {}),
                "timestamp": f"{e.timestamp[0]:04d}-{e.timestamp[1]:02d}",
                "band_names": e.band_names,
                "cloud_cover": e.cloud_cover,
            }
            for e in entries
        ]
    }
    path.write_text(json.dumps(doc, indent=2))
    return path
