"""
Pipeline stages over a workspace directory.

Layout (every stage finds its inputs by convention)::

    <workspace>/<year>/composite.tif
    <workspace>/tiles/{train,val}/index.json (+ tile .npy pairs), tiles/summary.json
    <workspace>/checkpoints/best.pt
    <workspace>/masks/<year>.tif
    <workspace>/reports/...

Each stage is a function of (config, upstream artifacts, seed) and stamps
its outputs with a provenance header; no wall-clock time is recorded, so
reruns are byte-identical.
"""

from __future__ import annotations

import json
import logging
import re
import shutil
from pathlib import Path

import numpy as np
import torch

from mangrovewatch import __version__
from mangrovewatch import change as ca
from mangrovewatch.config import PipelineConfig
from mangrovewatch.dataset import (
    SplitSpec,
    load_tiles,
    partition_by_content,
    save_tiles,
    split,
    tile_scene,
)
from mangrovewatch.errors import DependencyError
from mangrovewatch.evaluate import confusion, metrics, plot_triptych, write_report
from mangrovewatch.model import Checkpoint, build_model, predict_mask
from mangrovewatch.preprocess import preprocess_year
from mangrovewatch.raster import (
    load_manifest,
    pixel_area_hectares,
    read_grid,
    read_region_masks,
    read_scene,
    union_region,
    write_raster,
    write_scene,
)
from mangrovewatch.schemas import (
    CHANGE_REPORT,
    EVALUATION_REPORT,
    PREPROCESS_REPORT,
    TILE_INDEX,
    validate_json,
)
from mangrovewatch.training import TrainingCurve, train

LOGGER = logging.getLogger(__name__)

STAGE_VERSION = 1


def provenance(cfg: PipelineConfig, stage: str, seed: int | None = None) -> dict:
    return {
        "config_hash": cfg.digest(),
        "seed": cfg.dataset.seed if seed is None else seed,
        "stage": stage,
        "stage_version": STAGE_VERSION,
        "package_version": __version__,
    }


def _require(path: Path | None, what: str) -> Path:
    if path is None or not path.exists():
        raise DependencyError(f"missing {what}: {path}")
    return path


def composite_path(cfg: PipelineConfig, year: int) -> Path:
    return cfg.workspace / str(year) / "composite.tif"


def mask_path(cfg: PipelineConfig, year: int) -> Path:
    return cfg.workspace / "masks" / f"{year}.tif"


def reports_dir(cfg: PipelineConfig) -> Path:
    d = cfg.workspace / "reports"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, doc: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def available_years(directory: Path, pattern: str) -> list[int]:
    rx = re.compile(pattern)
    years = []
    for p in directory.glob("*"):
        m = rx.fullmatch(p.name)
        if m:
            years.append(int(m.group(1)))
    return sorted(years)


# ----------------------------------------------------------------------- stages


def run_preprocess(cfg: PipelineConfig, year: int) -> dict[str, Path]:
    manifest = load_manifest(_require(cfg.path("manifest"), "scene manifest"))
    regions = read_region_masks(_require(cfg.path("regions"), "region raster"))
    study = union_region(regions)
    result = preprocess_year(manifest, year, study, cfg.preprocess)
    out = write_scene(composite_path(cfg, year), result.composite, tags={"config_hash": cfg.digest()})
    report = _write_json(
        reports_dir(cfg) / f"preprocess_{year}.json",
        {"provenance": provenance(cfg, "preprocess"), **result.report()},
    )
    validate_json(report, PREPROCESS_REPORT)
    return {"composite": out, "report": report}


def run_tile(cfg: PipelineConfig) -> dict[str, Path]:
    d = cfg.dataset
    comp = read_scene(_require(composite_path(cfg, d.label_year), f"{d.label_year} composite"))
    comp = comp.select(cfg.model.band_names) if cfg.model.band_names else comp
    label = read_grid(_require(cfg.path("labels"), "label raster"))
    samples = tile_scene(comp, label, d.tile_size, d.stride, d.scale, tuple(d.strata_blocks))
    index = partition_by_content(samples)
    train_set, val_set = split(index, SplitSpec(d.val_fraction, d.seed))
    root = cfg.workspace / "tiles"
    prov = provenance(cfg, "tile")
    out = {}
    for name, subset in (("train", train_set), ("val", val_set)):
        directory = root / name
        if directory.exists():
            shutil.rmtree(directory)
        out[name] = save_tiles(directory, subset, prov)
        validate_json(out[name], TILE_INDEX)
    summary = {**index.summary(), "train": len(train_set), "val": len(val_set), "provenance": prov}
    out["summary"] = _write_json(root / "summary.json", summary)
    return out


def run_train(cfg: PipelineConfig, workers: int = 1) -> dict[str, Path]:
    root = cfg.workspace / "tiles"
    train_set = load_tiles(root / "train")
    val_set = load_tiles(root / "val")
    model = build_model(cfg.model, seed=cfg.train.seed)
    ckpt_path = cfg.workspace / "checkpoints" / "best.pt"
    prov = provenance(cfg, "train", cfg.train.seed)
    ckpt, curve = train(model, train_set, val_set, cfg.train, ckpt_path, workers=workers, provenance=prov)
    ckpt.save(ckpt_path)
    rep = reports_dir(cfg)
    return {
        "checkpoint": ckpt_path,
        "curve_csv": curve.to_csv(rep / "training_curve.csv"),
        "curve_plot": curve.plot(rep / "training_curve.png"),
    }


def run_predict(cfg: PipelineConfig, years: list[int] | None = None) -> dict[str, Path]:
    ckpt = Checkpoint.load(cfg.workspace / "checkpoints" / "best.pt")
    model = ckpt.build()
    years = years or cfg.predict.years or available_years(cfg.workspace, r"(\d{4})")
    if not years:
        raise DependencyError(f"no composites under {cfg.workspace}; run preprocess first")
    out = {}
    for year in years:
        scene = read_scene(_require(composite_path(cfg, year), f"{year} composite"))
        mask = predict_mask(model, scene, cfg.dataset.tile_size, cfg.predict.overlap, cfg.dataset.scale)
        out[str(year)] = write_raster(mask_path(cfg, year), mask, ["mangrove"], tags={"config_hash": cfg.digest()})
    return out


def run_evaluate(cfg: PipelineConfig, year: int, truth: Path | None = None) -> dict[str, Path]:
    pred = read_grid(_require(mask_path(cfg, year), f"{year} prediction mask"))
    truth_grid = read_grid(_require(truth or cfg.path("truth"), "reference mask"))
    cm = confusion(pred, truth_grid)
    jpath, cpath = write_report(reports_dir(cfg), cm, provenance(cfg, "evaluate"), stem=f"evaluation_{year}")
    validate_json(jpath, EVALUATION_REPORT)
    out = {"json": jpath, "csv": cpath}
    comp = composite_path(cfg, year)
    if comp.exists():
        scene = read_scene(comp)
        if all(b in scene.band_names for b in ("B4", "B3", "B2")):
            rgb = np.stack([scene.band(b).values for b in ("B4", "B3", "B2")], axis=-1).astype(np.float64)
            rgb = np.clip(np.where(rgb < 0, 0, rgb) / 3000.0, 0, 1)
            out["triptych"] = plot_triptych(
                reports_dir(cfg) / f"triptych_{year}.png", rgb, truth_grid.values > 0, pred.values > 0
            )
    LOGGER.info("evaluation %d: %s", year, {k: round(v, 4) for k, v in metrics(cm).items()})
    return out


def run_analyze(cfg: PipelineConfig) -> dict[str, Path]:
    a = cfg.analysis
    years = a.years or available_years(cfg.workspace / "masks", r"(\d{4})\.tif")
    if len(years) < 2:
        raise DependencyError(f"analysis needs masks for at least two years, found {years}")
    masks = {y: read_grid(_require(mask_path(cfg, y), f"{y} prediction mask")) for y in years}
    pixel_ha = pixel_area_hectares(masks[years[0]].transform)
    regions = read_region_masks(_require(cfg.path("regions"), "region raster"))
    report = ca.ChangeReport(
        ca.global_series(masks, pixel_ha),
        ca.per_region_series(masks, regions, pixel_ha),
        a.carbon_density,
        a.co2_factor,
        a.growth_method,
        a.reference_co2_t,
    )
    out = report.write(reports_dir(cfg), provenance(cfg, "analyze"))
    validate_json(out["json"], CHANGE_REPORT)
    first, last = a.change_pair or (years[0], years[-1])
    cmap = ca.change_map(masks[first], masks[last])
    out["change_map"] = ca.write_change_map(reports_dir(cfg) / f"change_{first}_{last}.tif", cmap)
    _write_json(
        reports_dir(cfg) / f"change_{first}_{last}_counts.json",
        {"provenance": provenance(cfg, "analyze"), "pixel_ha": pixel_ha, **cmap.counts()},
    )
    return out


def run_report(cfg: PipelineConfig) -> dict[str, Path]:
    """Gather stage reports into summary.json and a markdown digest."""
    rep = reports_dir(cfg)
    summary: dict = {"provenance": provenance(cfg, "report")}
    pre = sorted(rep.glob("preprocess_*.json"))
    summary["preprocess"] = {p.stem.split("_")[1]: json.loads(p.read_text())["window_months"] for p in pre}
    tiles = cfg.workspace / "tiles" / "summary.json"
    if tiles.exists():
        summary["tiles"] = {k: v for k, v in json.loads(tiles.read_text()).items() if k != "provenance"}
    curve_csv = rep / "training_curve.csv"
    if curve_csv.exists():
        curve = TrainingCurve.from_csv(curve_csv)
        best = max(curve.records, key=lambda r: r.val_miou)
        summary["training"] = {"epochs": len(curve), "best_epoch": best.epoch, "best_val_miou": best.val_miou}
    summary["evaluation"] = {
        p.stem.split("_")[1]: json.loads(p.read_text())["metrics"] for p in sorted(rep.glob("evaluation_*.json"))
    }
    change = rep / "change_report.json"
    if change.exists():
        doc = json.loads(change.read_text())
        summary["change"] = {"total_growth": doc["total"]["total_growth"], "carbon": doc["carbon"]}
    jpath = _write_json(rep / "summary.json", summary)

    lines = ["# Mangrove monitoring summary", ""]
    for year, months in summary["preprocess"].items():
        lines.append(f"- {year}: low-tide window {', '.join(months)}")
    if "training" in summary:
        t = summary["training"]
        lines.append(f"- training: {t['epochs']} epochs, best val mIoU {t['best_val_miou']:.4f} at epoch {t['best_epoch']}")
    for year, m in summary["evaluation"].items():
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
        lines.append(
            f"- evaluation {year}: producer {fmt(m['producer_acc'])}, user {fmt(m['user_acc'])}, "
            f"F1 {fmt(m['f1'])}, mIoU {fmt(m['miou'])}"
        )
    if "change" in summary:
        g, c = summary["change"]["total_growth"], summary["change"]["carbon"]
        pct = "n/a" if g["pct"] is None else f"{g['pct']:+.2f}%"
        lines.append(f"- area change: {g['delta_ha']:+.2f} ha ({pct})")
        lines.append(f"- carbon: {c['carbon_t']:,.2f} t C, {c['co2_t']:,.2f} t CO2")
        if c.get("reference_co2_t"):
            lines.append(f"- CO2 vs reference {c['reference_co2_t']:,.2f} t: {c['co2_deviation_pct']:+.3f}%")
    md = rep / "summary.md"
    md.write_text("\n".join(lines) + "\n")
    return {"json": jpath, "markdown": md}


def set_threads(workers: int) -> None:
    torch.set_num_threads(max(1, workers))
